//! FASTA alignments and their one-hot encoding.
//!
//! Nucleotide states are indexed in the fixed order A, G, C, T. Every rate
//! matrix, transition matrix and one-hot vector in the crate uses this order.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// State order shared by every module.
pub const ALPHABET: [u8; 4] = *b"AGCT";

const LINE_WIDTH: usize = 60;

/// Index of a nucleotide in [`ALPHABET`], case-insensitive.
pub fn state_index(c: u8) -> Option<usize> {
    match c.to_ascii_uppercase() {
        b'A' => Some(0),
        b'G' => Some(1),
        b'C' => Some(2),
        b'T' => Some(3),
        _ => None,
    }
}

/// Named, gap-free, equal-length nucleotide sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    names: Vec<String>,
    rows: Vec<String>,
}

impl Alignment {
    /// Validates and builds an alignment. Sequences are upper-cased.
    pub fn new(names: Vec<String>, rows: Vec<String>) -> Result<Self> {
        if names.len() != rows.len() {
            return Err(Error::LengthMismatch(names.len(), rows.len()));
        }
        if names.is_empty() {
            return Err(Error::InvalidAlignment("no sequences".into()));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::InvalidAlignment(format!("invalid sequence name {name:?}")));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidAlignment(format!("duplicate identifier {name}")));
            }
        }
        let rows: Vec<String> = rows.into_iter().map(|r| r.to_ascii_uppercase()).collect();
        let len = rows[0].len();
        if len == 0 {
            return Err(Error::InvalidAlignment(format!("sequence {} is empty", names[0])));
        }
        for (name, row) in names.iter().zip(&rows) {
            if row.len() != len {
                return Err(Error::InvalidAlignment(format!(
                    "sequence {name} has length {} but {} has length {len}",
                    row.len(),
                    names[0]
                )));
            }
            if let Some(pos) = row.bytes().position(|c| state_index(c).is_none()) {
                return Err(Error::InvalidAlignment(format!(
                    "sequence {name} has invalid character {:?} at position {}",
                    row.as_bytes()[pos] as char,
                    pos + 1
                )));
            }
        }
        Ok(Self { names, rows })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    /// Number of sequences (M).
    pub fn n_sequences(&self) -> usize {
        self.rows.len()
    }

    /// Alignment length (N).
    pub fn n_sites(&self) -> usize {
        self.rows[0].len()
    }
}

/// Parses FASTA text. Lines starting with `;` are comments; the record
/// identifier is the first whitespace-delimited token of the header.
pub fn parse_fasta(text: &str) -> Result<Alignment> {
    let mut names = Vec::new();
    let mut rows: Vec<String> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with(';') {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            let name = header.split_whitespace().next().unwrap_or("");
            if name.is_empty() {
                return Err(Error::Parse { line: i + 1, msg: "empty record name".into() });
            }
            names.push(name.to_string());
            rows.push(String::new());
        } else {
            let Some(seq) = rows.last_mut() else {
                return Err(Error::Parse { line: i + 1, msg: "sequence data before first header".into() });
            };
            if let Some(c) = line.bytes().find(|&c| state_index(c).is_none()) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("invalid character {:?}; only A, G, C, T are accepted", c as char),
                });
            }
            seq.push_str(line);
        }
    }
    if names.is_empty() {
        return Err(Error::Parse { line: 0, msg: "no FASTA records".into() });
    }
    Alignment::new(names, rows)
}

/// Serializes an alignment as FASTA with 60-column sequence lines.
pub fn write_fasta(a: &Alignment) -> String {
    let mut out = String::new();
    for (name, row) in a.names.iter().zip(&a.rows) {
        let _ = writeln!(out, ">{name}");
        for chunk in row.as_bytes().chunks(LINE_WIDTH) {
            out.push_str(std::str::from_utf8(chunk).expect("alignment rows are ASCII"));
            out.push('\n');
        }
    }
    out
}

/// Per-site one-hot representation of an alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedAlignment {
    n_sequences: usize,
    n_sites: usize,
    names: Vec<String>,
    /// State index per (site, sequence), site-major.
    states: Vec<u8>,
}

impl EncodedAlignment {
    pub fn n_sequences(&self) -> usize {
        self.n_sequences
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// State index of sequence `m` at site `n`.
    #[inline]
    pub fn state(&self, n: usize, m: usize) -> usize {
        self.states[n * self.n_sequences + m] as usize
    }

    /// All state indices, site-major: entry `n * M + m` is sequence `m` at site `n`.
    pub fn states(&self) -> &[u8] {
        &self.states
    }

    /// State indices at site `n`, one per sequence.
    pub fn site_states(&self, n: usize) -> &[u8] {
        &self.states[n * self.n_sequences..(n + 1) * self.n_sequences]
    }

    pub fn one_hot(&self, n: usize, m: usize) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.state(n, m)] = 1.0;
        v
    }

    /// The M×4 one-hot matrix of site `n`.
    pub fn site(&self, n: usize) -> Tensor {
        let mut t = Tensor::zeros(self.n_sequences, 4);
        for m in 0..self.n_sequences {
            t.set(m, self.state(n, m), 1.0);
        }
        t
    }

    /// All sites as an N×4M matrix, each row a flattened site matrix.
    pub fn flattened(&self) -> Tensor {
        let width = 4 * self.n_sequences;
        let mut t = Tensor::zeros(self.n_sites, width);
        for n in 0..self.n_sites {
            for m in 0..self.n_sequences {
                t.set(n, 4 * m + self.state(n, m), 1.0);
            }
        }
        t
    }

    pub fn decode(&self) -> Alignment {
        let rows = (0..self.n_sequences)
            .map(|m| (0..self.n_sites).map(|n| ALPHABET[self.state(n, m)] as char).collect())
            .collect();
        Alignment { names: self.names.clone(), rows }
    }
}

/// One-hot encodes a validated alignment.
pub fn encode(a: &Alignment) -> EncodedAlignment {
    let (m_count, n_count) = (a.n_sequences(), a.n_sites());
    let mut states = vec![0u8; m_count * n_count];
    for (m, row) in a.rows.iter().enumerate() {
        for (n, c) in row.bytes().enumerate() {
            states[n * m_count + m] = state_index(c).expect("validated alignment") as u8;
        }
    }
    EncodedAlignment { n_sequences: m_count, n_sites: n_count, names: a.names.clone(), states }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_two_records() {
        let a = parse_fasta(">s1\nACGT\n>s2\nAGGT\n").unwrap();
        assert_eq!(a.names(), ["s1", "s2"]);
        assert_eq!(a.rows(), ["ACGT", "AGGT"]);
    }

    #[test]
    fn concatenates_sequence_lines() {
        let a = parse_fasta(">s1\nAC\nGT\n>s2\nACGT\n").unwrap();
        assert_eq!(a.rows()[0], "ACGT");
    }

    #[test]
    fn upper_cases_and_skips_comments() {
        let a = parse_fasta("; generated\n>s1 some description\nacgt\n\n>s2\nAGGT\n").unwrap();
        assert_eq!(a.names(), ["s1", "s2"]);
        assert_eq!(a.rows()[0], "ACGT");
    }

    #[test]
    fn rejects_unequal_lengths() {
        let err = parse_fasta(">s1\nACGT\n>s2\nACG\n").unwrap_err();
        assert!(matches!(err, Error::InvalidAlignment(_)), "{err}");
    }

    #[test]
    fn rejects_gaps_ambiguity_duplicates_and_empty() {
        assert!(matches!(parse_fasta(">s1\nAC-T\n>s2\nACGT\n"), Err(Error::Parse { line: 2, .. })));
        assert!(parse_fasta(">s1\nACNT\n>s2\nACGT\n").is_err());
        assert!(parse_fasta(">s1\nACGT\n>s1\nACGT\n").is_err());
        assert!(parse_fasta("").is_err());
        assert!(parse_fasta("ACGT\n").is_err());
    }

    #[test]
    fn one_hot_convention() {
        let a = parse_fasta(">s1\nAT\n>s2\nGC\n").unwrap();
        let e = encode(&a);
        assert_eq!(e.one_hot(0, 0), [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(e.one_hot(1, 0), [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(e.one_hot(0, 1), [0.0, 1.0, 0.0, 0.0]);
        assert_eq!(e.one_hot(1, 1), [0.0, 0.0, 1.0, 0.0]);
        let site = e.site(1);
        assert_eq!(site.shape(), (2, 4));
        let flat = e.flattened();
        assert_eq!(flat.row_slice(1), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn writes_single_record() {
        let a = Alignment::new(vec!["s1".into()], vec!["ACGT".into()]).unwrap();
        assert_eq!(write_fasta(&a), ">s1\nACGT\n");
    }

    #[test]
    fn wraps_long_lines_at_60() {
        let row = "A".repeat(130);
        let a = Alignment::new(vec!["s".into()], vec![row]).unwrap();
        let text = write_fasta(&a);
        let lens: Vec<usize> = text.lines().skip(1).map(str::len).collect();
        assert_eq!(lens, [60, 60, 10]);
    }

    #[test]
    fn empty_name_is_an_error() {
        assert!(Alignment::new(vec!["".into()], vec!["ACGT".into()]).is_err());
    }

    fn alignment_strategy() -> impl Strategy<Value = Alignment> {
        (1usize..6, 1usize..150).prop_flat_map(|(m, n)| {
            prop::collection::vec(prop::collection::vec(prop::sample::select(ALPHABET.to_vec()), n), m).prop_map(
                move |rows| {
                    let names = (0..rows.len()).map(|i| format!("seq{i}")).collect();
                    let rows = rows.into_iter().map(|r| String::from_utf8(r).unwrap()).collect();
                    Alignment::new(names, rows).unwrap()
                },
            )
        })
    }

    proptest! {
        #[test]
        fn fasta_round_trip(a in alignment_strategy()) {
            prop_assert_eq!(parse_fasta(&write_fasta(&a)).unwrap(), a);
        }

        #[test]
        fn encode_round_trip_and_one_hot_rows(a in alignment_strategy()) {
            let e = encode(&a);
            for n in 0..e.n_sites() {
                let site = e.site(n);
                prop_assert_eq!(site.shape(), (a.n_sequences(), 4));
                for m in 0..e.n_sequences() {
                    let row = site.row_slice(m);
                    prop_assert_eq!(row.iter().sum::<f64>(), 1.0);
                    prop_assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
                }
            }
            prop_assert_eq!(e.decode(), a);
        }
    }
}
