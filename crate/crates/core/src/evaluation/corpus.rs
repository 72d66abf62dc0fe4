//! On-disk phantom corpus: one directory per phantom plus a JSON manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::RegionMask;
use super::phantom::{corpus_seeds, gen_phantom, PhantomPair, PhantomSpec};
use crate::error::{Error, Result};
use crate::image::{Image, Pgm};

pub const MANIFEST: &str = "corpus.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub spec: PhantomSpec,
    pub items: Vec<CorpusItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub id: String,
    pub seed: u64,
}

pub fn phantom_id(index: usize) -> String {
    format!("phantom_{index:03}")
}

pub fn single_name(k: usize) -> String {
    format!("single_{k}")
}

fn mask_pgm(mask: &RegionMask) -> Pgm {
    let samples: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    Pgm::from_u8(mask.height, mask.width, &samples)
}

fn read_mask(path: &Path) -> Result<RegionMask> {
    let pgm = Pgm::read(path)?;
    Ok(RegionMask {
        height: pgm.height,
        width: pgm.width,
        bits: pgm.samples.iter().map(|&s| s > 0).collect(),
    })
}

/// Writes `<dir>/<name>.tsr` and a 16-bit `<dir>/<name>.pgm` preview.
pub fn write_image(dir: &Path, name: &str, image: &Image) -> Result<()> {
    image.save_tsr(dir.join(format!("{name}.tsr")))?;
    image.to_pgm16().write(dir.join(format!("{name}.pgm")))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generates `count` phantoms and writes them under `out`.
pub fn write_corpus(
    out: &Path,
    seed: u64,
    count: usize,
    spec: &PhantomSpec,
) -> Result<CorpusManifest> {
    create_dir(out)?;
    let mut items = Vec::with_capacity(count);
    for (i, s) in corpus_seeds(seed, count).into_iter().enumerate() {
        let pair = gen_phantom(s, spec)?;
        let id = phantom_id(i);
        let dir = out.join(&id);
        create_dir(&dir)?;
        write_image(&dir, "dual", &pair.dual)?;
        for (k, single) in pair.singles.iter().enumerate() {
            write_image(&dir, &single_name(k), single)?;
            for (name, mask) in &pair.regions[k] {
                mask_pgm(mask).write(dir.join(format!("{name}_{k}.pgm")))?;
            }
        }
        items.push(CorpusItem { id, seed: s });
    }
    let manifest = CorpusManifest {
        seed,
        spec: spec.clone(),
        items,
    };
    let path = out.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a corpus. Region masks come from `regions` (defaults to `dir`).
pub fn read_corpus(dir: &Path, regions: Option<&Path>) -> Result<Vec<(String, PhantomPair)>> {
    let manifest = read_manifest(dir)?;
    let regions = regions.unwrap_or(dir);
    let n = manifest.spec.n_tracers();
    manifest
        .items
        .iter()
        .map(|item| {
            let d = dir.join(&item.id);
            let dual = Image::load_tsr(d.join("dual.tsr"))?;
            let singles = (0..n)
                .map(|k| Image::load_tsr(d.join(format!("{}.tsr", single_name(k)))))
                .collect::<Result<Vec<_>>>()?;
            let mut masks = Vec::with_capacity(n);
            for k in 0..n {
                let mut m = BTreeMap::new();
                for name in ["lesion", "background"] {
                    let p: PathBuf = regions.join(&item.id).join(format!("{name}_{k}.pgm"));
                    m.insert(name.to_string(), read_mask(&p)?);
                }
                masks.push(m);
            }
            Ok((
                item.id.clone(),
                PhantomPair {
                    dual,
                    singles,
                    regions: masks,
                    seed: item.seed,
                    spec: manifest.spec.clone(),
                },
            ))
        })
        .collect()
}
