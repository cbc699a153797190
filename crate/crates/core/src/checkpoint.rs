//! Versioned model container.
//!
//! Byte layout:
//!
//! ```text
//! MLADCKPT 1\n
//! config_bytes <n>\n
//! <n bytes of TOML training config>
//! tensor <name> <d0> [<d1> ...]\n     one line per tensor, in payload order
//! end\n
//! <payload: every tensor's row-major f64 values, little-endian>
//! ```
//!
//! Encoder parameters come first under their `layer{i}.*` / `head.*` names,
//! then `gmm.phi` (K), `gmm.mu` (K×d_h), `gmm.sigma` (K×d_h², row-major per
//! component, ε included), `gmm.epsilon` (1) when the model has a mixture,
//! and finally `train.energy` and `train.recon` (N each). Mixture-free
//! models have an empty `train.energy`.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::ModelParams;
use crate::error::{MladError, Result};
use crate::gmm::GmmStats;
use crate::tensorcore::Tensor;
use crate::trainer::{TrainConfig, TrainedModel};

pub const MAGIC: &str = "MLADCKPT";
pub const VERSION: u32 = 1;

struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn entry(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Entry {
    Entry {
        name: name.to_string(),
        shape,
        data,
    }
}

pub fn to_bytes(model: &TrainedModel) -> Vec<u8> {
    let mut entries: Vec<Entry> = model
        .params
        .entries()
        .into_iter()
        .map(|(name, t)| entry(&name, t.shape().to_vec(), t.data().to_vec()))
        .collect();
    if let Some(s) = &model.stats {
        let (k, m) = (s.components(), s.dim());
        entries.push(entry("gmm.phi", vec![k], s.phi.clone()));
        entries.push(entry("gmm.mu", vec![k, m], s.mu.concat()));
        entries.push(entry("gmm.sigma", vec![k, m * m], s.sigma.concat()));
        entries.push(entry("gmm.epsilon", vec![1], vec![s.epsilon]));
    }
    entries.push(entry("train.energy", vec![model.train_energies.len()], model.train_energies.clone()));
    entries.push(entry(
        "train.recon",
        vec![model.train_recon_errors.len()],
        model.train_recon_errors.clone(),
    ));

    let config = model.config.to_toml();
    let mut header = format!("{MAGIC} {VERSION}\nconfig_bytes {}\n{config}", config.len());
    for e in &entries {
        let _ = write!(header, "tensor {}", e.name);
        for d in &e.shape {
            let _ = write!(header, " {d}");
        }
        header.push('\n');
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    for e in &entries {
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Splits off one `\n`-terminated header line.
fn take_line<'a>(bytes: &'a [u8], pos: &mut usize, line_no: &mut usize, source: &str) -> Result<&'a str> {
    *line_no += 1;
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| MladError::parse(source, *line_no, "truncated header"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| MladError::parse(source, *line_no, "header is not UTF-8"))
}

pub fn from_bytes(bytes: &[u8], source: &str) -> Result<TrainedModel> {
    let mut pos = 0;
    let mut line_no = 0;
    let first = take_line(bytes, &mut pos, &mut line_no, source)?;
    let version = match first.split_once(' ') {
        Some((MAGIC, v)) => v,
        _ => return Err(MladError::parse(source, 1, "not a checkpoint file")),
    };
    if version != VERSION.to_string() {
        return Err(MladError::Version {
            found: version.to_string(),
            expected: VERSION.to_string(),
        });
    }
    let len_line = take_line(bytes, &mut pos, &mut line_no, source)?;
    let n: usize = len_line
        .strip_prefix("config_bytes ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| MladError::parse(source, line_no, "expected config_bytes <n>"))?;
    let config_text = bytes
        .get(pos..pos + n)
        .and_then(|b| std::str::from_utf8(b).ok())
        .ok_or_else(|| MladError::parse(source, line_no, "truncated config"))?;
    line_no += config_text.matches('\n').count();
    pos += n;
    let config = TrainConfig::from_toml(config_text)?;

    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
    loop {
        let line = take_line(bytes, &mut pos, &mut line_no, source)?;
        if line == "end" {
            break;
        }
        let mut fields = line.split(' ');
        if fields.next() != Some("tensor") {
            return Err(MladError::parse(source, line_no, format!("unexpected header line {line:?}")));
        }
        let name = fields
            .next()
            .ok_or_else(|| MladError::parse(source, line_no, "tensor line without a name"))?;
        let shape = fields
            .map(str::parse)
            .collect::<Result<Vec<usize>, _>>()
            .map_err(|e| MladError::parse(source, line_no, format!("bad shape: {e}")))?;
        shapes.push((name.to_string(), shape));
    }

    let mut tensors: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    let mut chunks = bytes[pos..].chunks_exact(8);
    for (name, shape) in shapes {
        let count: usize = shape.iter().product();
        let data: Vec<f64> = chunks
            .by_ref()
            .take(count)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if data.len() != count {
            return Err(MladError::parse(source, line_no, format!("payload truncated in {name}")));
        }
        if tensors.insert(name.clone(), (shape, data)).is_some() {
            return Err(MladError::parse(source, line_no, format!("duplicate tensor {name}")));
        }
    }
    if chunks.next().is_some() || !chunks.remainder().is_empty() {
        return Err(MladError::parse(source, line_no, "trailing bytes after payload"));
    }

    let mut take = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
        tensors
            .remove(name)
            .ok_or_else(|| MladError::parse(source, line_no, format!("missing tensor {name}")))
    };

    // A throwaway initialization supplies the expected names and shapes.
    let template = ModelParams::init(&config.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    let params = template.try_map(|name, t| {
        let (shape, data) = take(name)?;
        if shape != t.shape() {
            return Err(MladError::parse(
                source,
                line_no,
                format!("{name} has shape {shape:?}, config implies {:?}", t.shape()),
            ));
        }
        Tensor::new(shape, data)
    })?;

    let stats = if config.uses_gmm() {
        let (_, phi) = take("gmm.phi")?;
        let (mu_shape, mu) = take("gmm.mu")?;
        let (_, sigma) = take("gmm.sigma")?;
        let (_, eps) = take("gmm.epsilon")?;
        let m = mu_shape.get(1).copied().unwrap_or(0);
        if m == 0 || sigma.len() != phi.len() * m * m || mu.len() != phi.len() * m || eps.len() != 1 {
            return Err(MladError::parse(source, line_no, "inconsistent mixture tensors"));
        }
        Some(GmmStats::new(
            phi,
            mu.chunks(m).map(<[f64]>::to_vec).collect(),
            sigma.chunks(m * m).map(<[f64]>::to_vec).collect(),
            eps[0],
        )?)
    } else {
        None
    };
    let (_, train_energies) = take("train.energy")?;
    let (_, train_recon_errors) = take("train.recon")?;
    if let Some(extra) = tensors.keys().min() {
        return Err(MladError::parse(source, line_no, format!("unexpected tensor {extra}")));
    }
    Ok(TrainedModel {
        config,
        params,
        stats,
        train_energies,
        train_recon_errors,
    })
}

pub fn save(model: &TrainedModel, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| MladError::io(path, e))
}

pub fn load(path: &std::path::Path) -> Result<TrainedModel> {
    let bytes = std::fs::read(path).map_err(|e| MladError::io(path, e))?;
    from_bytes(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbeddedSet;
    use crate::encoder::ModelConfig;
    use crate::trainer::train;

    fn tiny(lambda1: f64) -> TrainedModel {
        let mats = (0..12)
            .map(|i| {
                let data = (0..5 * 8).map(|j| (((i * 7 + j * 3) % 11) as f64 - 5.0) / 5.0).collect();
                Tensor::matrix(5, 8, data).unwrap()
            })
            .collect();
        let data = EmbeddedSet::new(mats, vec![crate::dataset::Label::Normal; 12]).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch: 4,
            lambda1,
            lambda2: if lambda1 == 0.0 { 0.0 } else { -0.005 },
            model: ModelConfig {
                d: 8,
                d_h: 3,
                components: 2,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        train(&data, &cfg).unwrap().0
    }

    #[test]
    fn round_trip_is_exact() {
        for l1 in [0.1, 0.0] {
            let m = tiny(l1);
            let bytes = to_bytes(&m);
            let back = from_bytes(&bytes, "mem").unwrap();
            assert_eq!(back.config, m.config);
            assert_eq!(back.params, m.params);
            assert_eq!(back.stats, m.stats);
            assert_eq!(back.train_energies, m.train_energies);
            assert_eq!(to_bytes(&back), bytes);
        }
    }

    #[test]
    fn header_is_readable_text() {
        let bytes = to_bytes(&tiny(0.1));
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("MLADCKPT 1\nconfig_bytes "));
        assert!(text.contains("\ntensor layer0.w_q 8 8\n"));
        assert!(text.contains("\ntensor gmm.sigma 2 9\n"));
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let mut bytes = to_bytes(&tiny(0.1));
        bytes[9] = b'7';
        let err = from_bytes(&bytes, "mem").unwrap_err();
        assert!(matches!(&err, MladError::Version { found, expected } if found == "7" && expected == "1"));
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn rejects_damaged_files() {
        let bytes = to_bytes(&tiny(0.1));
        assert!(from_bytes(&bytes[..bytes.len() - 3], "mem").is_err());
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0; 8]);
        assert!(from_bytes(&longer, "mem").is_err());
        assert!(from_bytes(b"PNG\n", "mem").is_err());
    }
}
