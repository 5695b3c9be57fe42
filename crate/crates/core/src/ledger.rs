//! Per-patch bookkeeping for the fill pipeline.
//!
//! Each decoder-resolution patch moves through a one-way state machine:
//! `Masked -> CoarseFilled -> Inpainted`, while `Known` patches never change
//! state and their embeddings are never rewritten. The ledger also carries
//! the flattened (masked-pixel-zeroed) pixel vectors and the mask ratio that
//! drives the fill order.

use crate::error::Error;
use crate::patch::PatchSequence;
use crate::tensor::Tensor;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchState {
    Known,
    Masked,
    CoarseFilled,
    Inpainted,
}

#[derive(Clone, Debug)]
pub struct PatchEntry {
    state: PatchState,
    mask_ratio: f64,
    /// Flattened channel-major pixels with masked positions zeroed.
    pixels: Vec<f64>,
    /// Content embedding; set once by the embedding step, replaced by the
    /// coarse fill for masked patches.
    embedding: Option<Tensor>,
}

impl PatchEntry {
    pub fn state(&self) -> PatchState {
        self.state
    }

    pub fn mask_ratio(&self) -> f64 {
        self.mask_ratio
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn embedding(&self) -> Option<&Tensor> {
        self.embedding.as_ref()
    }
}

#[derive(Clone, Debug)]
pub struct PatchLedger {
    patch: usize,
    grid_h: usize,
    grid_w: usize,
    channels: usize,
    entries: Vec<PatchEntry>,
}

impl PatchLedger {
    /// Classify patches: a patch is `Known` iff not a single pixel of it is
    /// masked; anything partially covered must be reconstructed.
    pub fn from_sequence(seq: &PatchSequence) -> PatchLedger {
        let entries = (0..seq.count())
            .map(|i| {
                let ratio = seq.mask_ratio(i);
                PatchEntry {
                    state: if ratio == 0.0 {
                        PatchState::Known
                    } else {
                        PatchState::Masked
                    },
                    mask_ratio: ratio,
                    pixels: seq.vector(i).to_vec(),
                    embedding: None,
                }
            })
            .collect();
        PatchLedger {
            patch: seq.patch(),
            grid_h: seq.grid_h(),
            grid_w: seq.grid_w(),
            channels: seq.channels(),
            entries,
        }
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn count(&self) -> usize {
        self.entries.len()
    }

    /// Flattened patch width, `channels * patch^2`.
    pub fn dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn entry(&self, i: usize) -> &PatchEntry {
        &self.entries[i]
    }

    pub fn entries(&self) -> &[PatchEntry] {
        &self.entries
    }

    pub fn indices_in_state(&self, state: PatchState) -> Vec<usize> {
        (0..self.count())
            .filter(|&i| self.entries[i].state == state)
            .collect()
    }

    /// Raster-ordered members of the growing fill context: known plus
    /// already coarse-filled patches.
    pub fn fill_context(&self) -> Vec<usize> {
        (0..self.count())
            .filter(|&i| {
                matches!(
                    self.entries[i].state,
                    PatchState::Known | PatchState::CoarseFilled
                )
            })
            .collect()
    }

    /// Install the initial content embedding. Allowed exactly once per patch.
    pub fn set_embedding(&mut self, i: usize, embedding: Tensor) -> Result<()> {
        let entry = self.entry_mut(i)?;
        if entry.embedding.is_some() {
            return Err(Error::Ledger {
                detail: format!("patch {i} already has an embedding"),
            });
        }
        entry.embedding = Some(embedding);
        Ok(())
    }

    /// Coarse-fill transition: `Masked -> CoarseFilled`, replacing the
    /// embedding with the attention output.
    pub fn fill(&mut self, i: usize, filled: Tensor) -> Result<()> {
        let entry = self.entry_mut(i)?;
        if entry.state != PatchState::Masked {
            return Err(Error::Ledger {
                detail: format!(
                    "patch {i} is {:?}, only Masked patches can be filled",
                    entry.state
                ),
            });
        }
        entry.state = PatchState::CoarseFilled;
        entry.embedding = Some(filled);
        Ok(())
    }

    /// Final transition: `CoarseFilled -> Inpainted`.
    pub fn mark_inpainted(&mut self, i: usize) -> Result<()> {
        let entry = self.entry_mut(i)?;
        if entry.state != PatchState::CoarseFilled {
            return Err(Error::Ledger {
                detail: format!(
                    "patch {i} is {:?}, only CoarseFilled patches can be inpainted",
                    entry.state
                ),
            });
        }
        entry.state = PatchState::Inpainted;
        Ok(())
    }

    /// Overwrite the stored pixels of a non-known patch (used when a patch
    /// is finalized by neighborhood averaging rather than the head).
    pub fn set_pixels(&mut self, i: usize, pixels: Vec<f64>) -> Result<()> {
        let dim = self.dim();
        let entry = self.entry_mut(i)?;
        if entry.state == PatchState::Known {
            return Err(Error::Ledger {
                detail: format!("refusing to overwrite pixels of known patch {i}"),
            });
        }
        if pixels.len() != dim {
            return Err(Error::Ledger {
                detail: format!("patch {i}: pixel vector length {} != {dim}", pixels.len()),
            });
        }
        entry.pixels = pixels;
        Ok(())
    }

    fn entry_mut(&mut self, i: usize) -> Result<&mut PatchEntry> {
        let n = self.entries.len();
        self.entries.get_mut(i).ok_or_else(|| Error::Ledger {
            detail: format!("patch index {i} out of range for {n} patches"),
        })
    }
}
