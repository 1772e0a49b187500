//! Binary checkpoint: the magic `SRCN`, a little-endian `u32` format
//! version, then blocks of
//! `[name length u32][name][rank u32][dims u32 × rank][f32 LE data]`
//! sorted by name until end of file.
//!
//! Names: `gen/<param>`, `disc/<param>`, Adam moments under
//! `opt/{gen,disc}/<param>/{m,v}`, step counters `opt/{gen,disc}/step`, and
//! `meta/*` records holding the architectures, the number of completed
//! epochs and the best held-out Jaccard index so far. Counters are stored as
//! exactly representable f32 values; `meta/best_jci` holds the high and low
//! 32 bits of an f64 reinterpreted as f32 so it round-trips exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autograd::{ModelParams, Param, Tensor};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::segnets::{init_discriminator, init_generator, DiscriminatorConfig, GeneratorConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SRCN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Largest counter stored exactly in an f32.
const MAX_EXACT: u64 = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub gen_config: GeneratorConfig,
    pub disc_config: DiscriminatorConfig,
    pub gen: ModelParams<f32>,
    pub disc: ModelParams<f32>,
    /// Epochs completed when the checkpoint was taken.
    pub epoch: usize,
    pub best_jci: Option<f64>,
}

fn counter(name: &str, v: u64) -> Result<Tensor<f32>> {
    if v > MAX_EXACT {
        return Err(Error::Contract(format!("{name} = {v} exceeds the checkpoint counter range")));
    }
    Ok(Tensor::from_fn([1], |_| v as f32))
}

fn counters(values: &[usize]) -> Tensor<f32> {
    Tensor::from_fn([values.len()], |i| values[i] as f32)
}

impl Checkpoint {
    fn entries(&self) -> Result<BTreeMap<String, Tensor<f32>>> {
        let mut out = BTreeMap::new();
        for (prefix, params) in [("gen", &self.gen), ("disc", &self.disc)] {
            for (name, p) in params.iter() {
                out.insert(format!("{prefix}/{name}"), p.value.clone());
                out.insert(format!("opt/{prefix}/{name}/m"), p.first_moment.clone());
                out.insert(format!("opt/{prefix}/{name}/v"), p.second_moment.clone());
            }
            out.insert(format!("opt/{prefix}/step"), counter("optimizer step", params.step())?);
        }
        let g = &self.gen_config;
        let d = &self.disc_config;
        out.insert(
            "meta/gen_arch".into(),
            counters(&[g.input_channels, g.base_channels, g.depth, g.image_size]),
        );
        out.insert(
            "meta/disc_arch".into(),
            counters(&[d.input_channels, d.base_channels, d.depth]),
        );
        out.insert("meta/epoch".into(), counter("epoch", self.epoch as u64)?);
        let bits = self.best_jci.unwrap_or(f64::NAN).to_bits();
        out.insert(
            "meta/best_jci".into(),
            Tensor::new([2], vec![f32::from_bits((bits >> 32) as u32), f32::from_bits(bits as u32)])?,
        );
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let u32le = |v: usize| -> Result<[u8; 4]> {
            u32::try_from(v)
                .map(u32::to_le_bytes)
                .map_err(|_| Error::Contract(format!("{v} does not fit the checkpoint's u32 fields")))
        };
        for (name, t) in self.entries()? {
            out.extend_from_slice(&u32le(name.len())?);
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32le(t.rank())?);
            for &d in t.dims() {
                out.extend_from_slice(&u32le(d)?);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }

    /// Parses a checkpoint and checks its parameters against the
    /// architecture recorded inside it.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            kind: "checkpoint",
            path: path.to_path_buf(),
            detail,
        };
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("shorter than its header".into()))? != CHECKPOINT_MAGIC {
            return Err(bad("missing SRCN magic".into()));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let mut entries = BTreeMap::new();
        while cur.pos < bytes.len() {
            let (name, t) = cur.block().ok_or_else(|| bad(format!("truncated block at byte {}", cur.pos)))?;
            if entries.insert(name.clone(), t).is_some() {
                return Err(bad(format!("duplicate entry `{name}`")));
            }
        }

        let mut meta = |name: &str, len: usize| -> Result<Vec<f32>> {
            let t = entries.remove(name).ok_or_else(|| bad(format!("missing `{name}`")))?;
            if t.dims() != [len] {
                return Err(bad(format!("`{name}` has dims {:?}", t.dims())));
            }
            Ok(t.into_data())
        };
        let as_count = |v: f32| v as usize;
        let g = meta("meta/gen_arch", 4)?;
        let d = meta("meta/disc_arch", 3)?;
        let epoch = as_count(meta("meta/epoch", 1)?[0]);
        let jci = meta("meta/best_jci", 2)?;
        let gen_step = meta("opt/gen/step", 1)?[0] as u64;
        let disc_step = meta("opt/disc/step", 1)?[0] as u64;
        let bits = ((jci[0].to_bits() as u64) << 32) | jci[1].to_bits() as u64;
        let best = f64::from_bits(bits);

        let gen_config = GeneratorConfig {
            input_channels: as_count(g[0]),
            base_channels: as_count(g[1]),
            depth: as_count(g[2]),
            image_size: as_count(g[3]),
        };
        let disc_config = DiscriminatorConfig {
            input_channels: as_count(d[0]),
            base_channels: as_count(d[1]),
            depth: as_count(d[2]),
        };

        let mut take_params = |prefix: &str, step: u64| -> Result<ModelParams<f32>> {
            let mut params = ModelParams::new();
            let names: Vec<String> = entries
                .keys()
                .filter_map(|k| k.strip_prefix(&format!("{prefix}/")).map(str::to_owned))
                .collect();
            for name in names {
                let value = entries.remove(&format!("{prefix}/{name}")).expect("listed");
                let mut moment = |kind: &str| {
                    let key = format!("opt/{prefix}/{name}/{kind}");
                    entries.remove(&key).ok_or_else(|| bad(format!("missing `{key}`")))
                };
                let (m, v) = (moment("m")?, moment("v")?);
                if m.dims() != value.dims() || v.dims() != value.dims() {
                    return Err(bad(format!("optimizer moments of `{prefix}/{name}` have the wrong dims")));
                }
                params.insert_param(
                    name,
                    Param {
                        value,
                        first_moment: m,
                        second_moment: v,
                    },
                )?;
            }
            params.set_step(step);
            Ok(params)
        };
        let gen = take_params("gen", gen_step)?;
        let disc = take_params("disc", disc_step)?;
        if let Some(extra) = entries.keys().next() {
            return Err(bad(format!("unexpected entry `{extra}`")));
        }
        let ckpt = Checkpoint {
            gen_config,
            disc_config,
            gen,
            disc,
            epoch,
            best_jci: (!best.is_nan()).then_some(best),
        };
        ckpt.verify(&gen_config, &disc_config)?;
        Ok(ckpt)
    }

    /// Checks that the stored parameters are exactly those the given
    /// architectures create, reporting the first mismatched name.
    pub fn verify(&self, gen_config: &GeneratorConfig, disc_config: &DiscriminatorConfig) -> Result<()> {
        let mut rng = SplitMix64::new(0);
        let gen_template = init_generator(gen_config, &mut rng)
            .map_err(|e| arch_err("gen", format!("invalid generator architecture: {e}")))?;
        let disc_template = init_discriminator(disc_config, &mut rng)
            .map_err(|e| arch_err("disc", format!("invalid discriminator architecture: {e}")))?;
        compare("gen", &gen_template, &self.gen)?;
        compare("disc", &disc_template, &self.disc)
    }
}

fn arch_err(name: &str, detail: String) -> Error {
    Error::ArchitectureMismatch {
        name: name.into(),
        detail,
    }
}

fn compare(prefix: &str, expected: &ModelParams<f32>, found: &ModelParams<f32>) -> Result<()> {
    let mut names: Vec<&String> = expected.names().chain(found.names()).collect();
    names.sort();
    names.dedup();
    for name in names {
        let full = format!("{prefix}/{name}");
        match (expected.get(name), found.get(name)) {
            (Some(e), Some(f)) if e.value.dims() != f.value.dims() => {
                return Err(arch_err(
                    &full,
                    format!("expected dims {:?}, found {:?}", e.value.dims(), f.value.dims()),
                ))
            }
            (Some(_), None) => return Err(arch_err(&full, "missing from the checkpoint".into())),
            (None, Some(_)) => return Err(arch_err(&full, "not part of the architecture".into())),
            _ => {}
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn block(&mut self) -> Option<(String, Tensor<f32>)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).ok()?;
        let rank = self.u32()? as usize;
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Option<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
        let raw = self.take(numel.checked_mul(4)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_bits(u32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        Some((name, Tensor::new(dims, data).ok()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{AdamConfig, Direction, GradMap};

    fn sample() -> Checkpoint {
        let gen_config = GeneratorConfig {
            input_channels: 2,
            base_channels: 2,
            depth: 2,
            image_size: 8,
        };
        let disc_config = DiscriminatorConfig {
            input_channels: 1,
            base_channels: 2,
            depth: 2,
        };
        let mut rng = SplitMix64::new(1);
        let mut gen = init_generator(&gen_config, &mut rng).unwrap();
        let disc = init_discriminator(&disc_config, &mut rng).unwrap();
        let grads: GradMap = gen.iter().map(|(k, p)| (k.clone(), p.value.map(|v| v + 0.1))).collect();
        gen.adam_step(&grads, Direction::Descend, &AdamConfig::default()).unwrap();
        Checkpoint {
            gen_config,
            disc_config,
            gen,
            disc,
            epoch: 3,
            best_jci: Some(0.123_456_789_012_345_67),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let ckpt = sample();
        ckpt.save(&a).unwrap();
        let loaded = Checkpoint::load(&a).unwrap();
        assert_eq!(loaded, ckpt);
        assert_eq!(loaded.gen.step(), 1);
        loaded.save(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

        let none = Checkpoint { best_jci: None, ..ckpt };
        assert_eq!(Checkpoint::from_bytes(&none.to_bytes().unwrap(), &a).unwrap().best_jci, None);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SRCN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        // Entries are sorted, so the first block is the first discriminator bias.
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(&bytes[12..12 + len], b"disc/blk0/conv/bias");
    }

    #[test]
    fn mismatch_names_first_parameter() {
        let ckpt = sample();
        let deeper = GeneratorConfig { depth: 3, ..ckpt.gen_config };
        match ckpt.verify(&deeper, &ckpt.disc_config) {
            Err(Error::ArchitectureMismatch { name, .. }) => assert_eq!(name, "gen/dec0/convt/weight"),
            other => panic!("unexpected {other:?}"),
        }
        let wider = GeneratorConfig { base_channels: 3, ..ckpt.gen_config };
        match ckpt.verify(&wider, &ckpt.disc_config) {
            Err(Error::ArchitectureMismatch { name, detail }) => {
                assert_eq!(name, "gen/dec0/convt/weight");
                assert!(detail.contains("expected dims"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let path = Path::new("x.ckpt");
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], path), Err(Error::Format { .. })));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong, path).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(Checkpoint::from_bytes(&version, path).is_err());
    }
}
