//! Checkpoint serialization: a versioned header (magic, format version,
//! config as JSON, a free-form curriculum state reference, the global
//! step), followed by length-prefixed named tensor blobs as little-endian
//! f32, with a trailing FNV-1a checksum over everything before it. Loading
//! verifies the checksum before touching any tensor, so a truncated or
//! corrupted file never yields partial state.

use std::fs;
use std::path::Path;

use super::{Params, Transformer, TransformerConfig};
use crate::error::LearnerError;

const MAGIC: &[u8; 8] = b"SADCKPT\0";
const VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn put_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(bytes);
}

fn put_tensors(buf: &mut Vec<u8>, prefix: &str, params: &Params<f32>) {
    for (name, shape, data) in params.flat() {
        put_bytes(buf, format!("{prefix}{name}").as_bytes());
        buf.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for d in &shape {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Writes the full model and optimizer state. The write goes to a sibling
/// temp file first and renames into place, so a crash never leaves a
/// half-written checkpoint at `path`.
pub fn save_checkpoint(
    model: &Transformer<f32>,
    path: &Path,
    state_ref: &str,
) -> Result<(), LearnerError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_bytes(&mut buf, &serde_json::to_vec(&model.config).unwrap());
    put_bytes(&mut buf, state_ref.as_bytes());
    buf.extend_from_slice(&model.step.to_le_bytes());
    put_tensors(&mut buf, "", &model.params);
    put_tensors(&mut buf, "m.", &model.adam_m);
    put_tensors(&mut buf, "v.", &model.adam_v);
    let checksum = fnv1a(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());

    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LearnerError> {
        if self.pos + n > self.data.len() {
            return Err(LearnerError::BadCheckpoint("truncated file".into()));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64, LearnerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8], LearnerError> {
        let n = self.u64()? as usize;
        self.take(n)
    }
}

fn read_tensors_into(
    r: &mut Reader<'_>,
    prefix: &str,
    params: &mut Params<f32>,
    expected: &[(String, Vec<usize>)],
) -> Result<(), LearnerError> {
    let mut slots = params.flat_mut();
    for (slot, (name, shape)) in slots.iter_mut().zip(expected) {
        let bad = |msg: String| Err(LearnerError::BadCheckpoint(msg));
        let got_name = String::from_utf8_lossy(r.bytes()?).into_owned();
        let want_name = format!("{prefix}{name}");
        if got_name != want_name {
            return bad(format!("expected tensor {want_name}, found {got_name}"));
        }
        let ndim = r.u64()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64()? as usize);
        }
        if dims != *shape {
            return bad(format!("tensor {want_name} has shape {dims:?}, expected {shape:?}"));
        }
        let count = r.u64()? as usize;
        if count != slot.1.len() {
            return bad(format!("tensor {want_name} has {count} values, expected {}", slot.1.len()));
        }
        let raw = r.take(count * 4)?;
        for (dst, chunk) in slot.1.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok(())
}

/// Restores a model plus its curriculum state reference. Any structural
/// problem (bad magic, version, checksum, shape) is a checkpoint error.
pub fn load_checkpoint(path: &Path) -> Result<(Transformer<f32>, String), LearnerError> {
    let data = fs::read(path)?;
    let bad = |msg: &str| Err(LearnerError::BadCheckpoint(msg.into()));
    if data.len() < MAGIC.len() + 4 + 8 {
        return bad("file too short");
    }
    let body = &data[..data.len() - 8];
    let stored = u64::from_le_bytes(data[data.len() - 8..].try_into().unwrap());
    if fnv1a(body) != stored {
        return bad("checksum mismatch");
    }
    let mut r = Reader { data: body, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return bad("not a checkpoint file");
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(LearnerError::BadCheckpoint(format!(
            "format version {version}, expected {VERSION}"
        )));
    }
    let config: TransformerConfig = serde_json::from_slice(r.bytes()?)
        .map_err(|e| LearnerError::BadCheckpoint(format!("config: {e}")))?;
    let state_ref = String::from_utf8_lossy(r.bytes()?).into_owned();
    let step = r.u64()?;

    let mut model: Transformer<f32> = Transformer::new(config)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .params
        .flat()
        .into_iter()
        .map(|(name, shape, _)| (name, shape))
        .collect();
    read_tensors_into(&mut r, "", &mut model.params, &expected)?;
    read_tensors_into(&mut r, "m.", &mut model.adam_m, &expected)?;
    read_tensors_into(&mut r, "v.", &mut model.adam_v, &expected)?;
    if r.pos != body.len() {
        return bad("trailing bytes after tensors");
    }
    model.step = step;
    Ok((model, state_ref))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CompletionModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_batch(rng: &mut ChaCha8Rng) -> Vec<(String, String)> {
        (0..4)
            .map(|_| {
                let a: u32 = rng.gen_range(0..99);
                let b: u32 = rng.gen_range(0..99);
                (format!("F:{a}+{b}="), format!("{}", a + b))
            })
            .collect()
    }

    fn trained_toy() -> Transformer<f32> {
        let mut model = Transformer::new(TransformerConfig::toy()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..30 {
            let batch = toy_batch(&mut rng);
            model.train_batch(&batch).unwrap();
        }
        model
    }

    #[test]
    fn round_trip_restores_completions_and_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = trained_toy();
        save_checkpoint(&model, &path, "state-42").unwrap();
        let (mut loaded, state_ref) = load_checkpoint(&path).unwrap();
        assert_eq!(state_ref, "state-42");
        assert_eq!(loaded.step(), model.step());

        let prompts: Vec<String> = (0..16).map(|i| format!("F:{i}+{i}=")).collect();
        assert_eq!(
            model.complete_batch(&prompts, 8, 0.0).unwrap(),
            loaded.complete_batch(&prompts, 8, 0.0).unwrap()
        );

        // Optimizer moments survived: the next step matches bit for bit.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let batch = toy_batch(&mut rng);
        let a = model.train_batch(&batch).unwrap();
        let b = loaded.train_batch(&batch).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            model.complete("F:7+8=", 8, 0.0).unwrap(),
            loaded.complete("F:7+8=", 8, 0.0).unwrap()
        );
    }

    #[test]
    fn corruption_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = trained_toy();
        save_checkpoint(&model, &path, "").unwrap();
        let original = std::fs::read(&path).unwrap();

        let mut flipped = original.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0xff;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(LearnerError::BadCheckpoint(_))
        ));

        std::fs::write(&path, &original[..original.len() / 3]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(LearnerError::BadCheckpoint(_))
        ));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&trained_toy(), &path, "").unwrap();
        let mut data = std::fs::read(&path).unwrap();
        data[8] = 99;
        let end = data.len() - 8;
        let sum = fnv1a(&data[..end]);
        data[end..].copy_from_slice(&sum.to_le_bytes());
        std::fs::write(&path, &data).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
