//! Character-level tokeniser with an optional angle-token extension.
//!
//! The base vocabulary has 42 entries: end-of-sequence, unknown, space,
//! hyphen, period, question mark, the digits, and the lower-case letters.
//! Text is case-folded before encoding. With angle tokens enabled, 361
//! extra ids map the standalone integers -180..180 to single tokens.

/// End-of-sequence token id.
pub const TOK_EOS: usize = 0;
/// Unknown-character token id.
pub const TOK_UNK: usize = 1;
/// Size of the base character vocabulary.
pub const BASE_VOCAB: usize = 42;
/// Number of angle tokens when the extension is enabled.
pub const ANGLE_TOKENS: usize = 361;

const TOK_SPACE: usize = 2;
const TOK_HYPHEN: usize = 3;
const TOK_PERIOD: usize = 4;
const TOK_QUESTION: usize = 5;
const DIGIT_BASE: usize = 6;
const LETTER_BASE: usize = 16;

/// Encoder/decoder between text and token ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    angle_tokens: bool,
}

impl Tokenizer {
    pub fn new(angle_tokens: bool) -> Tokenizer {
        Tokenizer { angle_tokens }
    }

    pub fn has_angle_tokens(&self) -> bool {
        self.angle_tokens
    }

    pub fn vocab_size(&self) -> usize {
        BASE_VOCAB + if self.angle_tokens { ANGLE_TOKENS } else { 0 }
    }

    /// Token id for the integer `v`, when angle tokens are enabled and
    /// `v` is in [-180, 180].
    pub fn angle_token(&self, v: i64) -> Option<usize> {
        if self.angle_tokens && (-180..=180).contains(&v) {
            Some(BASE_VOCAB + (v + 180) as usize)
        } else {
            None
        }
    }

    /// The integer an angle token id stands for.
    pub fn token_angle(&self, id: usize) -> Option<i64> {
        if self.angle_tokens && (BASE_VOCAB..BASE_VOCAB + ANGLE_TOKENS).contains(&id) {
            Some(id as i64 - BASE_VOCAB as i64 - 180)
        } else {
            None
        }
    }

    /// Encodes text to token ids, without a trailing end-of-sequence.
    ///
    /// A standalone integer is an optional minus sign followed by a
    /// maximal digit run whose neighbouring characters are not
    /// alphanumeric, written canonically (no leading zeros, no "-0").
    /// With angle tokens enabled, standalone integers in [-180, 180]
    /// become single tokens; everything else encodes per character.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::with_capacity(chars.len());
        let mut i = 0;
        while i < chars.len() {
            if self.angle_tokens {
                if let Some((id, len)) = self.match_angle(&chars, i) {
                    out.push(id);
                    i += len;
                    continue;
                }
            }
            out.push(encode_char(chars[i]));
            i += 1;
        }
        out
    }

    fn match_angle(&self, chars: &[char], i: usize) -> Option<(usize, usize)> {
        if i > 0 && chars[i - 1].is_ascii_alphanumeric() {
            return None;
        }
        let (neg, start) = if chars[i] == '-' { (true, i + 1) } else { (false, i) };
        let mut end = start;
        while end < chars.len() && chars[end].is_ascii_digit() {
            end += 1;
        }
        if end == start {
            return None;
        }
        if let Some(c) = chars.get(end) {
            if c.is_ascii_alphanumeric() {
                return None;
            }
        }
        let run: String = chars[start..end].iter().collect();
        if run.len() > 1 && run.starts_with('0') {
            return None;
        }
        let v: i64 = run.parse().ok()?;
        let v = if neg { -v } else { v };
        if neg && v == 0 {
            return None;
        }
        self.angle_token(v).map(|id| (id, end - i))
    }

    /// Decodes ids back to text; end-of-sequence decodes to nothing and
    /// unrecognised ids to the replacement character.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == TOK_EOS {
                continue;
            }
            if let Some(v) = self.token_angle(id) {
                out.push_str(&v.to_string());
                continue;
            }
            out.push(decode_char(id));
        }
        out
    }
}

fn encode_char(c: char) -> usize {
    match c.to_ascii_lowercase() {
        ' ' => TOK_SPACE,
        '-' => TOK_HYPHEN,
        '.' => TOK_PERIOD,
        '?' => TOK_QUESTION,
        d @ '0'..='9' => DIGIT_BASE + (d as usize - '0' as usize),
        l @ 'a'..='z' => LETTER_BASE + (l as usize - 'a' as usize),
        _ => TOK_UNK,
    }
}

fn decode_char(id: usize) -> char {
    match id {
        TOK_SPACE => ' ',
        TOK_HYPHEN => '-',
        TOK_PERIOD => '.',
        TOK_QUESTION => '?',
        _ if (DIGIT_BASE..DIGIT_BASE + 10).contains(&id) => {
            (b'0' + (id - DIGIT_BASE) as u8) as char
        }
        _ if (LETTER_BASE..LETTER_BASE + 26).contains(&id) => {
            (b'a' + (id - LETTER_BASE) as u8) as char
        }
        _ => '\u{fffd}',
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_roundtrip_and_case_fold() {
        let tok = Tokenizer::new(false);
        let ids = tok.encode("What is 42?");
        assert_eq!(tok.decode(&ids), "what is 42?");
        assert_eq!(ids.len(), "what is 42?".chars().count());
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let tok = Tokenizer::new(false);
        let ids = tok.encode("a,b");
        assert_eq!(ids[1], TOK_UNK);
    }

    #[test]
    fn angle_tokens_compress_standalone_integers() {
        let on = Tokenizer::new(true);
        let off = Tokenizer::new(false);
        assert_eq!(on.encode("45"), vec![BASE_VOCAB + 225]);
        assert_eq!(off.encode("45").len(), 2);
        assert_eq!(on.encode("-180"), vec![BASE_VOCAB]);
        assert_eq!(on.encode("180"), vec![BASE_VOCAB + 360]);
        assert_eq!(on.encode("0"), vec![BASE_VOCAB + 180]);
    }

    #[test]
    fn angle_token_ids_cover_range_in_order() {
        let tok = Tokenizer::new(true);
        for v in -180..=180i64 {
            let id = tok.angle_token(v).unwrap();
            assert_eq!(id, BASE_VOCAB + (v + 180) as usize);
            assert_eq!(tok.token_angle(id), Some(v));
        }
        assert_eq!(tok.angle_token(181), None);
        assert_eq!(tok.vocab_size(), BASE_VOCAB + ANGLE_TOKENS);
    }

    #[test]
    fn non_standalone_or_non_canonical_runs_stay_characters() {
        let tok = Tokenizer::new(true);
        assert_eq!(tok.encode("a45").len(), 3);
        assert_eq!(tok.encode("45a").len(), 3);
        assert_eq!(tok.encode("045").len(), 3);
        assert_eq!(tok.encode("-0").len(), 2);
        assert_eq!(tok.encode("300").len(), 3);
        assert_eq!(tok.encode("the angle is -37."), {
            let mut ids = tok.encode("the angle is ");
            ids.push(tok.angle_token(-37).unwrap());
            ids.push(tok.encode(".")[0]);
            ids
        });
    }

    #[test]
    fn decode_roundtrips_angles() {
        let tok = Tokenizer::new(true);
        for text in ["-37", "0", "179 and -179", "12 va"] {
            assert_eq!(tok.decode(&tok.encode(text)), *text);
        }
    }
}
