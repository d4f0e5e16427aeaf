//! Corpus assembly (sample → render → filter) and the on-disk archive.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use super::expr::ShaderProgram;
use super::filter::{filter_image, FilterReason};
use super::parse::parse_with_seeds;
use super::random::random_program;
use super::render::render;
use crate::error::{contract, Error, Result};
use crate::gradcore::Tensor;
use crate::imageio;
use crate::par;

/// Attempts per survival-rate check.
pub const SURVIVAL_WINDOW: usize = 10_000;
pub const MIN_SURVIVAL: f64 = 0.01;
/// Programs drawn per parallel render batch.
const DRAW_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub attempted: usize,
    pub kept: usize,
    pub constant: usize,
    pub two_color: usize,
    pub sparse: usize,
}

impl CorpusStats {
    fn record(&mut self, reason: FilterReason) {
        self.attempted += 1;
        match reason {
            FilterReason::None => self.kept += 1,
            FilterReason::Constant => self.constant += 1,
            FilterReason::TwoColor => self.two_color += 1,
            FilterReason::Sparse => self.sparse += 1,
        }
    }

    pub fn survival_rate(&self) -> f64 {
        self.kept as f64 / self.attempted.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub images: Vec<Tensor>,
    pub programs: Vec<ShaderProgram>,
    pub stats: CorpusStats,
}

/// Sample programs until `count` rendered images pass the filter.
///
/// Programs are drawn from `rng` sequentially, so the result depends only on
/// the RNG state and arguments, never on the thread count.
pub fn build_corpus<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    h: usize,
    w: usize,
    max_depth: usize,
) -> Result<Corpus> {
    if count == 0 {
        return Err(contract("corpus count must be at least 1"));
    }
    if h == 0 || w == 0 || max_depth == 0 {
        return Err(contract("image size and max depth must be positive"));
    }
    let mut corpus = Corpus {
        images: Vec::with_capacity(count),
        programs: Vec::with_capacity(count),
        stats: CorpusStats::default(),
    };
    let mut window_kept = 0usize;
    let mut window_tried = 0usize;
    while corpus.images.len() < count {
        let programs: Vec<ShaderProgram> = (0..DRAW_BATCH).map(|_| random_program(rng, max_depth)).collect();
        let rendered = par::map(&programs, |p| {
            let img = render(p, h, w);
            let verdict = filter_image(&img).map(|r| r.reason);
            (img, verdict)
        });
        for (program, (img, verdict)) in programs.into_iter().zip(rendered) {
            if corpus.images.len() == count {
                break;
            }
            let reason = verdict?;
            corpus.stats.record(reason);
            window_tried += 1;
            if reason == FilterReason::None {
                window_kept += 1;
                corpus.images.push(img);
                corpus.programs.push(program);
            }
            if window_tried == SURVIVAL_WINDOW {
                let rate = window_kept as f64 / window_tried as f64;
                if rate < MIN_SURVIVAL {
                    return Err(Error::DegenerateCorpus {
                        rate,
                        window: SURVIVAL_WINDOW,
                    });
                }
                window_kept = 0;
                window_tried = 0;
            }
        }
    }
    Ok(corpus)
}

fn image_stem(index: usize) -> String {
    format!("{index:06}")
}

/// Write `manifest.tsv` plus one PNG per image (and a `.f32` sidecar when
/// `raw` is set).
pub fn write_corpus(dir: &Path, corpus: &Corpus, raw: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = fs::File::create(dir.join("manifest.tsv"))?;
    writeln!(manifest, "index\tprogram\tseeds")?;
    for (i, (img, prog)) in corpus.images.iter().zip(&corpus.programs).enumerate() {
        let seeds = prog.seeds.map(|s| s.to_string()).join(",");
        writeln!(manifest, "{i}\t{}\t{seeds}", prog.source())?;
        imageio::write_png(img, &dir.join(format!("{}.png", image_stem(i))))?;
        if raw {
            imageio::write_raw(img, &dir.join(format!("{}.f32", image_stem(i))))?;
        }
    }
    Ok(())
}

/// Load a corpus archive, preferring lossless sidecars when present.
pub fn read_corpus(dir: &Path) -> Result<(Vec<Tensor>, Vec<ShaderProgram>)> {
    let text = fs::read_to_string(dir.join("manifest.tsv"))?;
    let mut images = Vec::new();
    let mut programs = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Parse(format!("manifest.tsv line {}", n + 1));
        if cols.len() != 3 {
            return Err(bad());
        }
        let index: usize = cols[0].parse().map_err(|_| bad())?;
        if index != images.len() {
            return Err(bad());
        }
        let seeds: Vec<f32> = cols[2]
            .split(',')
            .map(|s| s.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let seeds: [f32; 4] = seeds.try_into().map_err(|_| bad())?;
        programs.push(parse_with_seeds(cols[1], seeds)?);
        let raw = dir.join(format!("{}.f32", image_stem(index)));
        images.push(if raw.exists() {
            imageio::read_raw(&raw)?
        } else {
            imageio::read_png(&dir.join(format!("{}.png", image_stem(index))))?
        });
    }
    Ok((images, programs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_count_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_corpus(&mut rng, 0, 8, 8, 6).is_err());
    }

    #[test]
    fn every_image_passes_filter_and_stats_add_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = build_corpus(&mut rng, 40, 16, 16, 10).unwrap();
        assert_eq!(c.images.len(), 40);
        assert!(c.images.iter().all(|i| filter_image(i).unwrap().keep));
        let s = c.stats;
        assert_eq!(s.kept, 40);
        assert_eq!(s.attempted, s.kept + s.constant + s.two_color + s.sparse);
    }

    #[test]
    fn archive_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = build_corpus(&mut rng, 5, 8, 8, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &c, true).unwrap();
        let (imgs, progs) = read_corpus(dir.path()).unwrap();
        assert_eq!(imgs, c.images);
        assert_eq!(progs.len(), 5);
        for (p, orig) in progs.iter().zip(&c.programs) {
            assert_eq!(render(p, 8, 8), render(orig, 8, 8));
        }
    }
}
