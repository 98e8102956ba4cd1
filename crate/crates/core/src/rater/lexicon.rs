//! Closed-class English function words (articles, adpositions, conjunctions,
//! pronouns, auxiliaries, common particles). Tokens of these words never count
//! as critical.

use std::collections::HashSet;
use std::sync::OnceLock;

/// The shipped word list, one lower-case word per line, `#` comments allowed.
pub const BUILTIN: &str = include_str!("../../data/function_words.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    words: HashSet<String>,
}

impl Lexicon {
    pub fn parse(text: &str) -> Lexicon {
        let words = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        Lexicon { words }
    }

    pub fn builtin() -> &'static Lexicon {
        static LEX: OnceLock<Lexicon> = OnceLock::new();
        LEX.get_or_init(|| Lexicon::parse(BUILTIN))
    }

    /// Case-insensitive membership; typographic apostrophes are folded to `'`.
    pub fn contains(&self, word: &str) -> bool {
        let w = word.to_lowercase().replace('\u{2019}', "'");
        self.words.contains(&w)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

pub fn is_function_word(word: &str) -> bool {
    Lexicon::builtin().contains(word)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_covers_closed_classes() {
        let lex = Lexicon::builtin();
        assert!(lex.len() >= 250, "lexicon has {} entries", lex.len());
        for w in ["on", "the", "of", "and", "it", "is", "would", "under", "An", "It’s"] {
            assert!(lex.contains(w), "{w}");
        }
        for w in ["table", "airplane", "red", "runs", "dog"] {
            assert!(!lex.contains(w), "{w}");
        }
    }

    #[test]
    fn comments_and_blanks_skipped() {
        let lex = Lexicon::parse("# header\n\nOf\n  the \n");
        assert_eq!(lex.len(), 2);
        assert!(lex.contains("of"));
        assert!(!lex.contains("# header"));
    }
}
