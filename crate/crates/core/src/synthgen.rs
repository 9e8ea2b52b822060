//! Synthetic corpora with planted block structure and controlled random
//! noise: block-biased Markov walks over a partitioned item space, with
//! block-level attributes plus one random attribute per item.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::rng::{purpose, stream};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("synth spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub items: u32,
    pub sequences: u32,
    pub len_min: usize,
    pub len_max: usize,
    /// items are partitioned evenly into this many co-occurrence blocks
    pub blocks: u32,
    /// probability a step ignores the block structure and draws uniformly
    /// over all items; the within-block transition probability is its
    /// complement
    pub noise: f32,
    pub attrs_per_block: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            items: 200,
            sequences: 2000,
            len_min: 20,
            len_max: 50,
            blocks: 4,
            noise: 0.2,
            attrs_per_block: 3,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(SynthError::BadSpec(format!(
                "noise {} outside [0, 1]",
                self.noise
            )));
        }
        if self.blocks < 1 || self.items < self.blocks {
            return Err(SynthError::BadSpec(format!(
                "need at least one item per block, got {} items in {} blocks",
                self.items, self.blocks
            )));
        }
        if self.len_min < 1 || self.len_max < self.len_min {
            return Err(SynthError::BadSpec(format!(
                "bad length range {}..{}",
                self.len_min, self.len_max
            )));
        }
        if self.sequences < 1 {
            return Err(SynthError::BadSpec("need at least one sequence".into()));
        }
        Ok(())
    }

    pub fn n_attrs(&self) -> u32 {
        self.blocks * self.attrs_per_block
    }
}

/// Generated corpus in the raw id space (items 1..=n, attrs 1..=m).
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub sequences: Vec<(String, Vec<u64>)>,
    /// item raw id -> attribute raw ids, ascending item order
    pub attributes: Vec<(u64, Vec<u64>)>,
    /// index raw_item - 1 -> block id (0-based)
    pub block_of: Vec<u32>,
}

impl SynthCorpus {
    pub fn block_of_item(&self, raw_item: u64) -> u32 {
        self.block_of[raw_item as usize - 1]
    }
}

/// Block-biased Markov walks: with probability 1 - noise the next item is
/// uniform within the current item's block, otherwise uniform over all
/// items. Deterministic under the spec's seed.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus, SynthError> {
    spec.validate()?;
    let items = spec.items as u64;
    let blocks = spec.blocks as u64;
    // even partition: block b covers items [b*items/blocks, (b+1)*items/blocks)
    let block_of: Vec<u32> = (0..items).map(|i| (i * blocks / items) as u32).collect();
    let block_range = |b: u64| -> (u64, u64) {
        (b * items / blocks + 1, (b + 1) * items / blocks)
    };

    let mut rng = stream(spec.seed, &[purpose::GEN]);
    let mut sequences = Vec::with_capacity(spec.sequences as usize);
    for s in 0..spec.sequences {
        let len = rng.random_range(spec.len_min..=spec.len_max);
        let mut seq = Vec::with_capacity(len);
        let mut current = rng.random_range(1..=items);
        seq.push(current);
        for _ in 1..len {
            current = if rng.random::<f32>() < spec.noise {
                rng.random_range(1..=items)
            } else {
                let (lo, hi) = block_range(block_of[current as usize - 1] as u64);
                rng.random_range(lo..=hi)
            };
            seq.push(current);
        }
        sequences.push((format!("u{}", s + 1), seq));
    }

    let n_attrs = spec.n_attrs() as u64;
    let attributes = (1..=items)
        .map(|item| {
            let b = block_of[item as usize - 1] as u64;
            let mut attrs: Vec<u64> = (b * spec.attrs_per_block as u64 + 1
                ..=(b + 1) * spec.attrs_per_block as u64)
                .collect();
            if n_attrs > 0 {
                attrs.push(rng.random_range(1..=n_attrs));
            }
            attrs.sort_unstable();
            attrs.dedup();
            (item, attrs)
        })
        .collect();

    Ok(SynthCorpus {
        sequences,
        attributes,
        block_of,
    })
}

pub struct SynthPaths {
    pub interactions: PathBuf,
    pub attributes: PathBuf,
    pub blocks: PathBuf,
}

/// Writes the corpus in the ingestion file formats plus a ground-truth
/// block map (`<item> TAB <block>` per line).
pub fn write_corpus(corpus: &SynthCorpus, dir: impl AsRef<Path>) -> Result<SynthPaths, SynthError> {
    std::fs::create_dir_all(dir.as_ref())?;
    let paths = SynthPaths {
        interactions: dir.as_ref().join("interactions.tsv"),
        attributes: dir.as_ref().join("attributes.tsv"),
        blocks: dir.as_ref().join("blocks.tsv"),
    };

    let mut f = std::io::BufWriter::new(std::fs::File::create(&paths.interactions)?);
    for (user, items) in &corpus.sequences {
        let joined = items
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(f, "{user}\t{joined}")?;
    }
    f.flush()?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(&paths.attributes)?);
    for (item, attrs) in &corpus.attributes {
        let joined = attrs
            .iter()
            .map(|a| a.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(f, "{item}\t{joined}")?;
    }
    f.flush()?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(&paths.blocks)?);
    for (idx, &b) in corpus.block_of.iter().enumerate() {
        writeln!(f, "{}\t{b}", idx + 1)?;
    }
    f.flush()?;
    Ok(paths)
}
