//! Residue alphabets and validated chains.

use std::fmt;

use crate::error::{Error, Result};

/// The 20 standard amino acids in BLOSUM row order.
pub const AMINO_SYMBOLS: &[u8; 20] = b"ARNDCQEGHILKMFPSTWYV";

/// An ordered finite alphabet of single-byte symbols.
///
/// Chains store indices into the alphabet, so any kernel table indexed by
/// the same alphabet can be applied to them without further lookups.
#[derive(Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<u8>,
    lookup: [u8; 256],
}

const NO_SYMBOL: u8 = u8::MAX;

impl Alphabet {
    pub fn new(symbols: &[u8]) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::Empty("alphabet".into()));
        }
        if symbols.len() >= NO_SYMBOL as usize {
            return Err(Error::InvalidParameter(format!(
                "alphabet of {} symbols is too large",
                symbols.len()
            )));
        }
        let mut lookup = [NO_SYMBOL; 256];
        for (i, &s) in symbols.iter().enumerate() {
            let s = s.to_ascii_uppercase();
            if lookup[s as usize] != NO_SYMBOL {
                return Err(Error::InvalidParameter(format!(
                    "duplicate alphabet symbol {:?}",
                    s as char
                )));
            }
            lookup[s as usize] = i as u8;
        }
        Ok(Alphabet {
            symbols: symbols.iter().map(u8::to_ascii_uppercase).collect(),
            lookup,
        })
    }

    /// The standard 20-letter amino-acid alphabet.
    pub fn amino() -> Self {
        Self::new(AMINO_SYMBOLS).expect("static alphabet is valid")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[u8] {
        &self.symbols
    }

    /// Index of a symbol, case-insensitive.
    pub fn index_of(&self, symbol: u8) -> Option<usize> {
        match self.lookup[symbol.to_ascii_uppercase() as usize] {
            NO_SYMBOL => None,
            i => Some(i as usize),
        }
    }

    pub fn symbol(&self, index: usize) -> u8 {
        self.symbols[index]
    }
}

impl Default for Alphabet {
    fn default() -> Self {
        Self::amino()
    }
}

impl fmt::Debug for Alphabet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Alphabet")
            .field(&String::from_utf8_lossy(&self.symbols))
            .finish()
    }
}

/// A nonempty chain of residues, stored as alphabet indices.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AminoChain {
    residues: Vec<u8>,
    text: String,
}

impl AminoChain {
    /// Validates `text` against the standard amino-acid alphabet.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(&Alphabet::amino(), text)
    }

    pub fn parse_with(alphabet: &Alphabet, text: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::EmptyChain);
        }
        let mut residues = Vec::with_capacity(text.len());
        for (index, ch) in text.chars().enumerate() {
            let idx = if ch.is_ascii() {
                alphabet.index_of(ch as u8)
            } else {
                None
            };
            match idx {
                Some(i) => residues.push(i as u8),
                None => return Err(Error::IllegalResidue { ch, index }),
            }
        }
        let text = residues
            .iter()
            .map(|&i| alphabet.symbol(i as usize) as char)
            .collect();
        Ok(AminoChain { residues, text })
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }

    /// Alphabet indices of the residues.
    pub fn residues(&self) -> &[u8] {
        &self.residues
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

impl fmt::Display for AminoChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl fmt::Debug for AminoChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AminoChain({})", self.text)
    }
}

impl std::str::FromStr for AminoChain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

/// Uppercase chain over the 20-letter alphabet, or the first offending index.
pub fn validate_chain(text: &str) -> Result<AminoChain> {
    AminoChain::parse(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_chain() {
        let c = validate_chain("ARNDC").unwrap();
        assert_eq!(c.len(), 5);
        assert_eq!(c.residues(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn illegal_letter_reports_index() {
        match validate_chain("ARB") {
            Err(Error::IllegalResidue { ch: 'B', index: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_chain_rejected() {
        assert!(matches!(validate_chain(""), Err(Error::EmptyChain)));
    }

    #[test]
    fn lowercase_is_normalized() {
        assert_eq!(validate_chain("wyv").unwrap().as_str(), "WYV");
    }

    #[test]
    fn unknown_x_rejected() {
        assert!(matches!(
            validate_chain("AAX"),
            Err(Error::IllegalResidue { ch: 'X', index: 2 })
        ));
    }

    #[test]
    fn custom_alphabet() {
        let dna = Alphabet::new(b"ACGT").unwrap();
        let c = AminoChain::parse_with(&dna, "gattaca").unwrap();
        assert_eq!(c.as_str(), "GATTACA");
        assert!(Alphabet::new(b"AA").is_err());
    }
}
