//! Binary checkpoint format.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic            8 bytes  "DL2SCKPT"
//! version          u32      currently 1
//! config length    u64
//! config           RunConfig as JSON (UTF-8)
//! tensor count     u32
//! per tensor:
//!   name length    u32
//!   name           UTF-8
//!   rows, cols     u64, u64
//!   data           rows * cols f64
//! ```
//!
//! All parameters of the student, the projection and the (frozen) teacher
//! are stored, so a checkpoint is self-contained: loading reproduces
//! bitwise-identical forward outputs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use distill_core::align::ProjectionLayer;
use distill_core::numerics::Matrix;
use distill_core::toy_models::{StudentEncoder, TeacherEncoder};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DL2SCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A loaded checkpoint: the config echo plus all three parameter sets.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub student: StudentEncoder,
    pub projection: ProjectionLayer,
    pub teacher: TeacherEncoder,
}

fn write_tensor<W: Write>(w: &mut W, name: &str, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(rows as u64).to_le_bytes())?;
    w.write_all(&(cols as u64).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    config: &RunConfig,
    student: &StudentEncoder,
    projection: &ProjectionLayer,
    teacher: &TeacherEncoder,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let config_json = serde_json::to_string(config).expect("config serializes");
    w.write_all(&(config_json.len() as u64).to_le_bytes())?;
    w.write_all(config_json.as_bytes())?;

    // input_proj + blocks + head weights/bias, projection pair, teacher pair.
    let tensor_count = 3 + student.blocks().len() + 2 + 2;
    w.write_all(&(tensor_count as u32).to_le_bytes())?;

    let ip = student.input_proj();
    write_tensor(&mut w, "student.input_proj", ip.rows(), ip.cols(), ip.data())?;
    for (k, block) in student.blocks().iter().enumerate() {
        write_tensor(&mut w, &format!("student.block{k}"), block.rows(), block.cols(), block.data())?;
    }
    let hw = student.head_weights();
    write_tensor(&mut w, "student.head_weights", hw.rows(), hw.cols(), hw.data())?;
    write_tensor(&mut w, "student.head_bias", 1, student.head_bias().len(), student.head_bias())?;
    write_tensor(
        &mut w,
        "projection.weights",
        projection.weights.rows(),
        projection.weights.cols(),
        projection.weights.data(),
    )?;
    write_tensor(&mut w, "projection.bias", 1, projection.bias.len(), &projection.bias)?;
    let emb = teacher.embedding();
    write_tensor(&mut w, "teacher.embedding", emb.rows(), emb.cols(), emb.data())?;
    let mix = teacher.mixing();
    write_tensor(&mut w, "teacher.mixing", mix.rows(), mix.cols(), mix.data())?;
    w.flush()?;
    Ok(())
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.inner.read_exact(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut buf = [0u8; 8];
        self.inner.read_exact(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    fn bytes(&mut self, len: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.inner.read_exact(&mut buf)?;
        Ok(buf)
    }

    fn tensor(&mut self) -> Result<(String, Matrix)> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.bytes(name_len)?)
            .map_err(|e| CliError::Checkpoint(format!("tensor name is not UTF-8: {e}")))?;
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 8];
        for _ in 0..rows * cols {
            self.inner.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let matrix = Matrix::from_vec(rows, cols, data)
            .map_err(|e| CliError::Checkpoint(format!("tensor {name}: {e}")))?;
        Ok((name, matrix))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| {
        CliError::Checkpoint(format!("cannot open {}: {e}", path.display()))
    })?;
    let mut r = Reader {
        inner: BufReader::new(file),
    };

    let magic = r.bytes(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CliError::Checkpoint(format!(
            "bad magic {magic:?}, not a checkpoint file"
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CliError::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config_len = r.u64()? as usize;
    let config_text = String::from_utf8(r.bytes(config_len)?)
        .map_err(|e| CliError::Checkpoint(format!("config echo is not UTF-8: {e}")))?;
    let config = RunConfig::from_json(&config_text)?;

    let tensor_count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..tensor_count {
        let (name, matrix) = r.tensor()?;
        tensors.insert(name, matrix);
    }
    let mut take = |name: &str| -> Result<Matrix> {
        tensors
            .remove(name)
            .ok_or_else(|| CliError::Checkpoint(format!("missing tensor {name}")))
    };

    let input_proj = take("student.input_proj")?;
    let mut blocks = Vec::with_capacity(config.student_blocks);
    for k in 0..config.student_blocks {
        blocks.push(take(&format!("student.block{k}"))?);
    }
    let head_weights = take("student.head_weights")?;
    let head_bias = take("student.head_bias")?.data().to_vec();
    let student = StudentEncoder::from_parts(input_proj, blocks, head_weights, head_bias)
        .map_err(|e| CliError::Checkpoint(e.to_string()))?;

    let proj_weights = take("projection.weights")?;
    let proj_bias = take("projection.bias")?.data().to_vec();
    let projection = ProjectionLayer::from_parts(proj_weights, proj_bias)
        .map_err(|e| CliError::Checkpoint(e.to_string()))?;

    let teacher = TeacherEncoder::from_parts(take("teacher.embedding")?, take("teacher.mixing")?)
        .map_err(|e| CliError::Checkpoint(e.to_string()))?;

    if !tensors.is_empty() {
        let names: Vec<&str> = tensors.keys().map(String::as_str).collect();
        return Err(CliError::Checkpoint(format!("unexpected tensors: {names:?}")));
    }

    Ok(Checkpoint {
        config,
        student,
        projection,
        teacher,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use distill_core::distill::{KdMode, Trainer};
    use distill_core::numerics::Matrix;
    use distill_core::rng::Rng;

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let config = RunConfig::default();
        let trainer =
            Trainer::new(&config.model_dims(), config.distill_config(), KdMode::Enabled).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &config, &trainer.student, &trainer.projection, &trainer.teacher)
            .unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, config);
        assert_eq!(loaded.student.bits_hash(), trainer.student.bits_hash());
        assert_eq!(loaded.projection.bits_hash(), trainer.projection.bits_hash());
        assert_eq!(loaded.teacher.bits_hash(), trainer.teacher.bits_hash());

        // Identical forward outputs on a probe batch.
        let probe = Matrix::uniform_init(7, config.frame_dim, 1.0, &mut Rng::seed_from(3));
        let (h_a, l_a) = trainer.student.forward(&probe).unwrap();
        let (h_b, l_b) = loaded.student.forward(&probe).unwrap();
        assert_eq!(h_a.bits_hash(), h_b.bits_hash());
        assert_eq!(l_a.bits_hash(), l_b.bits_hash());
    }

    #[test]
    fn checkpoint_rejects_garbage_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, CliError::Checkpoint(_)), "{err}");
        assert!(load_checkpoint(&dir.path().join("absent.ckpt")).is_err());
    }
}
