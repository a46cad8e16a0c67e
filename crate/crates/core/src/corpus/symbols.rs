use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLANK_TOKEN: &str = "<blank>";
pub const SPACE_INDEX: u32 = 1;

/// Shared character inventory: index 0 is the CTC blank, index 1 is space,
/// then every observed character in codepoint order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolTable {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl SymbolTable {
    pub fn from_chars<I: IntoIterator<Item = char>>(chars: I) -> Self {
        let set: BTreeSet<char> = chars.into_iter().filter(|&c| c != ' ').collect();
        let mut ordered = vec![' '];
        ordered.extend(set);
        let index = ordered
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32 + 1))
            .collect();
        SymbolTable {
            chars: ordered,
            index,
        }
    }

    /// Table over every character appearing in `transcripts`.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(transcripts: I) -> Self {
        Self::from_chars(transcripts.into_iter().flat_map(str::chars))
    }

    /// Number of output classes including blank.
    pub fn len(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn symbol(&self, idx: u32) -> Option<char> {
        match idx {
            0 => None,
            i => self.chars.get(i as usize - 1).copied(),
        }
    }

    pub fn index_of(&self, c: char) -> Option<u32> {
        self.index.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| self.index_of(c).ok_or(Error::UnknownSymbol(c)))
            .collect()
    }

    /// Maps indices back to text; blanks and out-of-range indices are skipped.
    pub fn decode(&self, labels: &[u32]) -> String {
        labels.iter().filter_map(|&i| self.symbol(i)).collect()
    }

    /// All symbols as strings, blank first. This is the serialized form.
    pub fn to_strings(&self) -> Vec<String> {
        std::iter::once(BLANK_TOKEN.to_string())
            .chain(self.chars.iter().map(|c| c.to_string()))
            .collect()
    }

    pub fn from_strings(symbols: &[String]) -> Result<Self> {
        let bad = || Error::invalid("symbol list must be <blank>, space, then single characters in codepoint order");
        if symbols.len() < 2 || symbols[0] != BLANK_TOKEN || symbols[1] != " " {
            return Err(bad());
        }
        let mut chars = Vec::new();
        for s in &symbols[2..] {
            let mut it = s.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => return Err(bad()),
            }
        }
        let table = SymbolTable::from_chars(chars.iter().copied());
        if table.to_strings() != symbols {
            return Err(bad());
        }
        Ok(table)
    }
}

impl Serialize for SymbolTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_strings().serialize(s)
    }
}

impl<'de> Deserialize<'de> for SymbolTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<String>::deserialize(d)?;
        SymbolTable::from_strings(&v).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_and_reserved_slots() {
        let t = SymbolTable::build(["ab", "bc"]);
        assert_eq!(t.to_strings(), vec!["<blank>", " ", "a", "b", "c"]);
        assert_eq!(t.index_of(' '), Some(SPACE_INDEX));
        assert_eq!(t.len(), 5);
    }

    #[test]
    fn disjoint_scripts_are_unioned() {
        let t = SymbolTable::build(["αβ γ", "ab"]);
        assert_eq!(t.to_strings(), vec!["<blank>", " ", "a", "b", "α", "β", "γ"]);
    }

    #[test]
    fn empty_input_gives_blank_and_space() {
        let t = SymbolTable::build(Vec::<&str>::new());
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn round_trip_and_unknown() {
        let t = SymbolTable::build(["hello world"]);
        let enc = t.encode("hello world").unwrap();
        assert_eq!(t.decode(&enc), "hello world");
        assert!(matches!(t.encode("x"), Err(Error::UnknownSymbol('x'))));
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<SymbolTable>(&json).unwrap(), t);
        assert!(SymbolTable::from_strings(&["a".into()]).is_err());
    }
}
