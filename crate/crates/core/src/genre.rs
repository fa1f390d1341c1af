use std::fmt;

use crate::error::{Error, Result};

pub const N_GENRES: usize = 10;

/// Genre codes in id order.
pub const GENRE_CODES: [&str; N_GENRES] = ["BR", "PO", "LO", "MH", "LH", "HO", "WA", "KR", "JS", "JB"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GenreLabel {
    id: usize,
}

impl GenreLabel {
    pub fn from_id(id: usize) -> Result<Self> {
        if id >= N_GENRES {
            return Err(Error::Invalid(format!("genre id {id} out of range [0, {N_GENRES})")));
        }
        Ok(Self { id })
    }

    pub fn from_code(code: &str) -> Result<Self> {
        GENRE_CODES
            .iter()
            .position(|c| c.eq_ignore_ascii_case(code.trim()))
            .map(|id| Self { id })
            .ok_or_else(|| Error::Invalid(format!("unknown genre code `{code}`")))
    }

    pub fn id(self) -> usize {
        self.id
    }

    pub fn code(self) -> &'static str {
        GENRE_CODES[self.id]
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..N_GENRES).map(|id| Self { id })
    }

    pub fn one_hot(self) -> [f64; N_GENRES] {
        let mut v = [0.0; N_GENRES];
        v[self.id] = 1.0;
        v
    }
}

impl fmt::Display for GenreLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_code_bijection() {
        for g in GenreLabel::all() {
            assert_eq!(GenreLabel::from_code(g.code()).unwrap(), g);
            assert_eq!(GenreLabel::from_id(g.id()).unwrap(), g);
        }
        assert_eq!(GenreLabel::from_code("lo").unwrap().id(), 2);
        assert!(GenreLabel::from_id(10).is_err());
        assert!(GenreLabel::from_code("XX").is_err());
    }
}
