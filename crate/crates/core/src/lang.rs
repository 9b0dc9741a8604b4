use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Report languages, ordered alphabetically by ISO 639-1 code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    De,
    El,
    En,
    Es,
    Fr,
    It,
    Pt,
}

impl Language {
    pub const ALL: [Language; 7] = [Language::De, Language::El, Language::En, Language::Es, Language::Fr, Language::It, Language::Pt];

    pub fn code(self) -> &'static str {
        match self {
            Language::De => "de",
            Language::El => "el",
            Language::En => "en",
            Language::Es => "es",
            Language::Fr => "fr",
            Language::It => "it",
            Language::Pt => "pt",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Language::ALL
            .into_iter()
            .find(|l| l.code() == s)
            .ok_or_else(|| Error::Argument(format!("unknown language code {s:?}")))
    }
}

/// Parses a list of codes, rejecting duplicates, and returns them sorted.
pub fn parse_languages<S: AsRef<str>>(codes: &[S]) -> Result<Vec<Language>, Error> {
    let mut langs = codes.iter().map(|c| c.as_ref().parse()).collect::<Result<Vec<Language>, _>>()?;
    langs.sort();
    let before = langs.len();
    langs.dedup();
    if langs.len() != before {
        return Err(Error::Argument("duplicate language code".into()));
    }
    Ok(langs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_round_trip() {
        for l in Language::ALL {
            assert_eq!(l.code().parse::<Language>().unwrap(), l);
        }
        assert!("xx".parse::<Language>().is_err());
    }

    #[test]
    fn parse_sorts_and_rejects_duplicates() {
        assert_eq!(parse_languages(&["es", "en"]).unwrap(), vec![Language::En, Language::Es]);
        assert!(parse_languages(&["en", "en"]).is_err());
    }
}
