//! Shared corpus access for the stage trainers: loads phantom pairs from
//! disk, preprocesses the volumes, and extracts stage-input patches.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::phantom::{
    load_corpus_manifest, load_pair_manifest, CorpusManifest, PairManifest, SplitKind, Timepoint,
};
use crate::types::NoduleAnnotation;
use crate::volume::io::read_volume;
use crate::volume::{extract_patch, preprocess, PatchCube, VolumeGrid};

/// One phantom pair with preprocessed volumes.
#[derive(Debug, Clone)]
pub struct LoadedPair<F: Scalar> {
    pub pair_index: usize,
    pub dir: PathBuf,
    pub split: SplitKind,
    pub t1: VolumeGrid<F>,
    pub t2: VolumeGrid<F>,
    pub manifest: PairManifest,
}

impl<F: Scalar> LoadedPair<F> {
    pub fn volume(&self, tp: Timepoint) -> &VolumeGrid<F> {
        match tp {
            Timepoint::T1 => &self.t1,
            Timepoint::T2 => &self.t2,
        }
    }

    pub fn annotations(&self, tp: Timepoint) -> &[NoduleAnnotation] {
        match tp {
            Timepoint::T1 => &self.manifest.annotations_t1,
            Timepoint::T2 => &self.manifest.annotations_t2,
        }
    }

    /// Stage-input patch around an annotation center.
    pub fn annotation_patch(&self, tp: Timepoint, ann_index: usize, side: usize) -> Result<PatchCube<F>> {
        let ann = &self.annotations(tp)[ann_index];
        extract_patch(self.volume(tp), ann.center_mm, side)
    }
}

/// Loads and preprocesses every pair of one split.
pub fn load_split<F: Scalar>(
    corpus_dir: impl AsRef<Path>,
    manifest: &CorpusManifest,
    split: SplitKind,
) -> Result<Vec<LoadedPair<F>>> {
    let corpus_dir = corpus_dir.as_ref();
    let mut out = Vec::new();
    for (i, entry) in manifest.pairs_in(split) {
        let dir = corpus_dir.join(&entry.dir);
        let pm = load_pair_manifest(&dir)?;
        let t1 = preprocess(&read_volume::<F>(dir.join("t1.nii"))?)?;
        let t2 = preprocess(&read_volume::<F>(dir.join("t2.nii"))?)?;
        out.push(LoadedPair {
            pair_index: i,
            dir,
            split,
            t1,
            t2,
            manifest: pm,
        });
    }
    Ok(out)
}

/// Loads a corpus manifest and asserts the corpus is non-empty.
pub fn open_corpus(corpus_dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    let manifest = load_corpus_manifest(&corpus_dir)?;
    if manifest.pairs.is_empty() {
        return Err(Error::EmptyInput("corpus has no pairs".into()));
    }
    Ok(manifest)
}
