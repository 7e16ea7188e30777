//! Binary checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "CTCK" u32:version [32]:fingerprint u8:stage
//! u32:n_symbols { u32:len utf8 }*
//! u8:direction u32:input_dim u32:layers u32:cells u32:projection u32:output_dim
//! u32:n_blocks { u32:name_len name u32:rows u32:cols f32* }*
//! f64:lr { f64* velocity, block shapes as above }
//! u32:epochs u64:updates u8:has_best f64:best
//! [32]:sha256 of everything before
//! ```
//!
//! Parameters are stored as f32, so a checkpoint rounds its model to f32 on
//! construction; writing and reading back is then exact.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labelset::LabelInventory;
use crate::model::{ArchConfig, Direction, Model};
use crate::trainer::config::Stage;

const MAGIC: &[u8; 4] = b"CTCK";
const VERSION: u32 = 1;

pub type Fingerprint = [u8; 32];

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: Fingerprint,
    pub stage: Stage,
    pub inventory: LabelInventory,
    pub model: Model,
    pub velocity: Model,
    pub lr: f64,
    pub epochs: u32,
    pub updates: u64,
    pub best_dev: Option<f64>,
}

/// Rounds every parameter to the nearest f32.
pub fn round_to_f32(model: &mut Model) {
    for m in model.blocks_mut() {
        for v in m.as_mut_slice() {
            *v = *v as f32 as f64;
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.usize()?;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("string is not utf-8"))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    /// Assembles a checkpoint, rounding the model parameters to f32.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fingerprint: Fingerprint,
        stage: Stage,
        inventory: LabelInventory,
        mut model: Model,
        velocity: Model,
        lr: f64,
        epochs: u32,
        updates: u64,
        best_dev: Option<f64>,
    ) -> Result<Self> {
        if model.arch().output_dim != inventory.len() {
            return Err(Error::usage(format!(
                "model has {} outputs for {} labels",
                model.arch().output_dim,
                inventory.len()
            )));
        }
        if velocity.arch() != model.arch() {
            return Err(Error::usage("optimizer state does not match the model"));
        }
        round_to_f32(&mut model);
        Ok(Checkpoint {
            fingerprint,
            stage,
            inventory,
            model,
            velocity,
            lr,
            epochs,
            updates,
            best_dev,
        })
    }

    pub fn fingerprint_hex(&self) -> String {
        hex::encode(self.fingerprint)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        out.push(self.stage.code());

        put_u32(&mut out, self.inventory.len());
        for s in self.inventory.symbols() {
            put_str(&mut out, s);
        }

        let a = self.model.arch();
        out.push(match a.direction {
            Direction::Unidirectional => 0,
            Direction::Bidirectional => 1,
        });
        for d in [a.input_dim, a.layers, a.cells, a.projection, a.output_dim] {
            put_u32(&mut out, d);
        }

        let named = self.model.named_blocks();
        put_u32(&mut out, named.len());
        for (name, m) in &named {
            put_str(&mut out, name);
            put_u32(&mut out, m.rows());
            put_u32(&mut out, m.cols());
            for &v in m.as_slice() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }

        out.extend_from_slice(&self.lr.to_le_bytes());
        for m in self.velocity.blocks() {
            for &v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.epochs.to_le_bytes());
        out.extend_from_slice(&self.updates.to_le_bytes());
        out.push(self.best_dev.is_some() as u8);
        out.extend_from_slice(&self.best_dev.unwrap_or(0.0).to_le_bytes());

        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses and verifies a checkpoint; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m);
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader {
            bytes: body,
            pos: 4,
            path,
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let fingerprint: Fingerprint = r.take(32)?.try_into().unwrap();
        let stage = Stage::from_code(r.u8()?).ok_or_else(|| bad("unknown stage code"))?;

        let n_symbols = r.usize()?;
        let symbols = (0..n_symbols).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let inventory =
            LabelInventory::from_symbols(&symbols).map_err(|e| bad(&format!("inventory: {e}")))?;

        let direction = match r.u8()? {
            0 => Direction::Unidirectional,
            1 => Direction::Bidirectional,
            _ => return Err(bad("unknown direction code")),
        };
        let arch = ArchConfig {
            direction,
            input_dim: r.usize()?,
            layers: r.usize()?,
            cells: r.usize()?,
            projection: r.usize()?,
            output_dim: r.usize()?,
        };
        let mut model = Model::zeros(arch).map_err(|e| bad(&format!("architecture: {e}")))?;
        let expected: Vec<(String, (usize, usize))> = model
            .named_blocks()
            .into_iter()
            .map(|(n, m)| (n, m.shape()))
            .collect();
        if r.usize()? != expected.len() {
            return Err(bad("parameter block count does not match the architecture"));
        }
        for ((name, shape), block) in expected.iter().zip(model.blocks_mut()) {
            let got = r.string()?;
            let (rows, cols) = (r.usize()?, r.usize()?);
            if &got != name || (rows, cols) != *shape {
                return Err(bad(&format!(
                    "block {got} {rows}x{cols}, expected {name} {}x{}",
                    shape.0, shape.1
                )));
            }
            let raw = r.take(rows * cols * 4)?;
            for (v, c) in block.as_mut_slice().iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
            }
        }

        let lr = r.f64()?;
        let mut velocity = model.zeros_like();
        for block in velocity.blocks_mut() {
            for v in block.as_mut_slice() {
                *v = r.f64()?;
            }
        }
        let epochs = r.u32()?;
        let updates = r.u64()?;
        let has_best = r.u8()?;
        let best = r.f64()?;
        if r.pos != body.len() {
            return Err(bad("trailing bytes after the counters"));
        }
        if output_mismatch(&model, &inventory) {
            return Err(bad("output layer size does not match the inventory"));
        }
        Ok(Checkpoint {
            fingerprint,
            stage,
            inventory,
            model,
            velocity,
            lr,
            epochs,
            updates,
            best_dev: (has_best != 0).then_some(best),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Write-then-rename so an interrupted save never leaves a truncated
        // file under the final name.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, &path.display().to_string())
    }
}

fn output_mismatch(model: &Model, inv: &LabelInventory) -> bool {
    model.arch().output_dim != inv.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::numerics::Rng;

    fn sample(direction: Direction) -> Checkpoint {
        let inv = LabelInventory::full();
        let arch = ArchConfig {
            direction,
            input_dim: 4,
            layers: 2,
            cells: 3,
            projection: 2,
            output_dim: inv.len(),
        };
        let mut rng = Rng::new(9);
        let model = init_model(arch, &mut rng, 0.3).unwrap();
        let velocity = init_model(arch, &mut rng, 1e-3).unwrap();
        Checkpoint::new([7; 32], Stage::TeacherCtc, inv, model, velocity, 7e-5, 12, 34_567, Some(1.25))
            .unwrap()
    }

    #[test]
    fn round_trips_bit_exactly() {
        for dir in [Direction::Unidirectional, Direction::Bidirectional] {
            let c = sample(dir);
            let bytes = c.to_bytes();
            let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn reduced_inventory_and_missing_best_survive() {
        let inv = LabelInventory::reduced();
        let arch = ArchConfig {
            direction: Direction::Unidirectional,
            input_dim: 2,
            layers: 1,
            cells: 2,
            projection: 2,
            output_dim: inv.len(),
        };
        let m = Model::zeros(arch).unwrap();
        let c = Checkpoint::new([0; 32], Stage::FinetuneCtc, inv, m.clone(), m, 1e-4, 0, 0, None)
            .unwrap();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes(), "mem").unwrap(), c);
    }

    #[test]
    fn model_is_rounded_to_f32() {
        let c = sample(Direction::Unidirectional);
        for m in c.model.blocks() {
            assert!(m.as_slice().iter().all(|&v| v == v as f32 as f64));
        }
    }

    #[test]
    fn corruption_is_a_format_error() {
        let bytes = sample(Direction::Bidirectional).to_bytes();
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped, "x"), Err(Error::Format { .. })));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1], "x"),
            Err(Error::Format { .. })
        ));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic, "x"), Err(Error::Format { .. })));
        assert!(matches!(Checkpoint::from_bytes(b"CT", "x"), Err(Error::Format { .. })));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/a.ckpt");
        let c = sample(Direction::Unidirectional);
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
        assert!(!p.with_extension("tmp").exists());
    }

    #[test]
    fn mismatched_inventory_is_rejected() {
        let c = sample(Direction::Unidirectional);
        assert!(Checkpoint::new(
            c.fingerprint,
            c.stage,
            LabelInventory::reduced(),
            c.model.clone(),
            c.velocity.clone(),
            c.lr,
            0,
            0,
            None
        )
        .is_err());
    }
}
