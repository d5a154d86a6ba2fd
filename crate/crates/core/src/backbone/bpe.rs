//! Byte-level BPE tokenizer compatible with the CLIP reference vocabulary.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use regex::Regex;

use crate::error::{Error, Result};

pub const START_TOKEN: &str = "<|startoftext|>";
pub const END_TOKEN: &str = "<|endoftext|>";

/// Maximum number of merges the reference vocabulary uses.
const MAX_MERGES: usize = 49152 - 256 - 2;

#[derive(Debug, Clone)]
pub struct BpeTokenizer {
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    pattern: Regex,
    sot: u32,
    eot: u32,
}

/// Returns the byte→symbol table and the symbols in vocabulary order.
fn bytes_to_unicode() -> ([char; 256], Vec<char>) {
    let mut printable: Vec<u32> = (u32::from('!')..=u32::from('~'))
        .chain(u32::from('¡')..=u32::from('¬'))
        .chain(u32::from('®')..=u32::from('ÿ'))
        .collect();
    let mut chars = printable.clone();
    let mut extra = 0;
    for b in 0..256u32 {
        if !printable.contains(&b) {
            printable.push(b);
            chars.push(256 + extra);
            extra += 1;
        }
    }
    let mut table = ['\0'; 256];
    let mut ordered = Vec::with_capacity(256);
    for (b, c) in printable.into_iter().zip(chars) {
        let c = char::from_u32(c).expect("valid code point");
        table[b as usize] = c;
        ordered.push(c);
    }
    (table, ordered)
}

impl BpeTokenizer {
    /// Reads a merges file (`.gz` or plain text). The first line is a
    /// version header; at most the reference number of merges is used.
    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = fs::read(path)?;
        let text = if path.extension().is_some_and(|e| e == "gz") {
            let mut s = String::new();
            flate2::read::GzDecoder::new(raw.as_slice())
                .read_to_string(&mut s)
                .map_err(|e| Error::WeightLoad {
                    path: path.to_path_buf(),
                    detail: format!("cannot decompress merges: {e}"),
                })?;
            s
        } else {
            String::from_utf8(raw).map_err(|e| Error::WeightLoad {
                path: path.to_path_buf(),
                detail: format!("merges file is not UTF-8: {e}"),
            })?
        };
        Self::from_merges_text(&text)
    }

    pub fn from_merges_text(text: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for line in text.split('\n').skip(1).take(MAX_MERGES) {
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some(a), Some(b)) => merges.push((a.to_string(), b.to_string())),
                _ => continue,
            }
        }
        let (byte_encoder, symbols) = bytes_to_unicode();
        let mut vocab: Vec<String> = symbols.iter().map(|c| c.to_string()).collect();
        vocab.extend(symbols.iter().map(|c| format!("{c}</w>")));
        vocab.extend(merges.iter().map(|(a, b)| format!("{a}{b}")));
        vocab.push(START_TOKEN.to_string());
        vocab.push(END_TOKEN.to_string());
        let encoder: HashMap<String, u32> = vocab
            .into_iter()
            .enumerate()
            .map(|(i, v)| (v, i as u32))
            .collect();
        let ranks = merges.into_iter().enumerate().map(|(i, m)| (m, i)).collect();
        let pattern = Regex::new(
            r"(?i)<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+",
        )
        .expect("valid pattern");
        let sot = encoder[START_TOKEN];
        let eot = encoder[END_TOKEN];
        Ok(Self {
            encoder,
            ranks,
            byte_encoder,
            pattern,
            sot,
            eot,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.len()
    }

    pub fn sot(&self) -> u32 {
        self.sot
    }

    pub fn eot(&self) -> u32 {
        self.eot
    }

    /// Content token ids of `text`, without start/end markers.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let cleaned = clean_text(text).to_lowercase();
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(&cleaned) {
            let token: String = m
                .as_str()
                .bytes()
                .map(|b| self.byte_encoder[b as usize])
                .collect();
            for piece in self.bpe(&token) {
                // Every byte-level symbol is in the vocabulary, so lookups
                // only fail for a merges file that contradicts itself.
                if let Some(&id) = self.encoder.get(&piece) {
                    ids.push(id);
                }
            }
        }
        ids
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        if token == START_TOKEN || token == END_TOKEN {
            return vec![token.to_string()];
        }
        let chars: Vec<char> = token.chars().collect();
        let mut word: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = word.last_mut() {
            last.push_str("</w>");
        }
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|p| {
                    self.ranks
                        .get(&(p[0].clone(), p[1].clone()))
                        .map(|&r| (r, p[0].clone(), p[1].clone()))
                })
                .min_by_key(|(r, _, _)| *r);
            let Some((_, first, second)) = best else {
                break;
            };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == first && word[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
        }
        word
    }
}

/// HTML-unescapes common entities and collapses whitespace runs.
fn clean_text(text: &str) -> String {
    let unescaped = unescape_html(&unescape_html(text));
    unescaped.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn unescape_html(s: &str) -> String {
    if !s.contains('&') {
        return s.to_string();
    }
    let entity = Regex::new(r"&(#[0-9]+|#[xX][0-9a-fA-F]+|amp|lt|gt|quot|apos|nbsp);")
        .expect("valid pattern");
    entity
        .replace_all(s, |c: &regex::Captures<'_>| {
            let body = &c[1];
            let ch = match body {
                "amp" => Some('&'),
                "lt" => Some('<'),
                "gt" => Some('>'),
                "quot" => Some('"'),
                "apos" => Some('\''),
                "nbsp" => Some('\u{a0}'),
                _ if body.starts_with("#x") || body.starts_with("#X") => {
                    u32::from_str_radix(&body[2..], 16).ok().and_then(char::from_u32)
                }
                _ => body[1..].parse::<u32>().ok().and_then(char::from_u32),
            };
            ch.map(|c| c.to_string()).unwrap_or_else(|| c[0].to_string())
        })
        .into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> BpeTokenizer {
        // merges: "h e" -> "he", "l l" -> "ll", "he ll" -> "hell", "o</w>" stays
        BpeTokenizer::from_merges_text("#version: 0.2\nh e\nl l\nhe ll\nhell o</w>\n").unwrap()
    }

    #[test]
    fn toy_vocabulary_layout() {
        let t = toy();
        assert_eq!(t.vocab_size(), 512 + 4 + 2);
        assert_eq!(t.sot(), 516);
        assert_eq!(t.eot(), 517);
    }

    #[test]
    fn merges_apply_by_rank() {
        let t = toy();
        // "hello" -> h e l l o</w> -> he l l o</w> -> he ll o</w> -> hell o</w> -> hello</w>
        assert_eq!(t.encode("hello"), vec![512 + 3]);
        // "hel" -> he l</w>: "l</w>" is a byte symbol with the end marker
        let l_end = 256 + (b'l' - b'!') as u32;
        assert_eq!(t.encode("HEL"), vec![512, l_end]);
    }

    #[test]
    fn whitespace_and_entities_are_normalized() {
        let t = toy();
        assert_eq!(t.encode("  hello \n\t hello "), t.encode("hello hello"));
        assert_eq!(t.encode("&amp;"), t.encode("&"));
    }

    #[test]
    fn empty_text_has_no_tokens() {
        assert!(toy().encode("").is_empty());
    }
}
