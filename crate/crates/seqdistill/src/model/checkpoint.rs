//! Checkpoint container: per tensor an ASCII header `tensor <name> <ndim>
//! <d1> .. <dk>` followed by the row-major values as little-endian f64,
//! then `meta` records with the model config and vocabulary checksums,
//! closed by `end`. Loading validates names and shapes against the config.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{LstmParams, ModelConfig, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &str = "seqdistill-checkpoint v1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub src_vocab_sha256: String,
    pub tgt_vocab_sha256: String,
}

/// SHA-256 of a vocabulary's canonical file form.
pub fn vocab_sha256(vocab: &Vocabulary) -> String {
    let mut hasher = Sha256::new();
    hasher.update(vocab.to_file_string().as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    src_vocab_sha256: &str,
    tgt_vocab_sha256: &str,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{MAGIC}")?;
    for (name, tensor) in params.named_tensors() {
        write!(w, "tensor {name} {}", tensor.shape().len())?;
        for d in tensor.shape() {
            write!(w, " {d}")?;
        }
        writeln!(w)?;
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    let cfg = &params.cfg;
    writeln!(w, "meta layers {}", cfg.layers)?;
    writeln!(w, "meta hidden {}", cfg.hidden)?;
    writeln!(w, "meta embed_dim {}", cfg.embed_dim)?;
    writeln!(w, "meta src_vocab_size {}", cfg.src_vocab_size)?;
    writeln!(w, "meta tgt_vocab_size {}", cfg.tgt_vocab_size)?;
    writeln!(w, "meta dropout_rate {}", cfg.dropout_rate)?;
    writeln!(w, "meta src_vocab_sha256 {src_vocab_sha256}")?;
    writeln!(w, "meta tgt_vocab_sha256 {tgt_vocab_sha256}")?;
    writeln!(w, "end")?;
    w.flush()?;
    Ok(())
}

fn read_line(r: &mut impl BufRead) -> Result<String> {
    let mut line = String::new();
    let n = r.read_line(&mut line)?;
    if n == 0 {
        return Err(Error::Checkpoint("unexpected end of file".into()));
    }
    Ok(line.trim_end_matches('\n').to_string())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    if read_line(&mut r)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut meta: BTreeMap<String, String> = BTreeMap::new();
    loop {
        let line = read_line(&mut r)?;
        let mut parts = line.split(' ');
        match parts.next() {
            Some("tensor") => {
                let name = parts
                    .next()
                    .ok_or_else(|| Error::Checkpoint("tensor record missing name".into()))?
                    .to_string();
                let ndim: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Checkpoint(format!("bad ndim for {name}")))?;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    let d: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::Checkpoint(format!("bad shape for {name}")))?;
                    shape.push(d);
                }
                let numel: usize = shape.iter().product();
                let mut raw = vec![0u8; numel * 8];
                r.read_exact(&mut raw)?;
                let data: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect();
                let tensor = Tensor::new(shape, data)
                    .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
                if tensors.insert(name.clone(), tensor).is_some() {
                    return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
                }
                order.push(name);
            }
            Some("meta") => {
                let key = parts
                    .next()
                    .ok_or_else(|| Error::Checkpoint("meta record missing key".into()))?;
                let value = parts.collect::<Vec<_>>().join(" ");
                meta.insert(key.to_string(), value);
            }
            Some("end") => break,
            other => {
                return Err(Error::Checkpoint(format!("unexpected record {other:?}")));
            }
        }
    }

    let get = |key: &str| -> Result<&String> {
        meta.get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta key {key}")))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad meta value for {key}")))
    };
    let cfg = ModelConfig {
        layers: parse_usize("layers")?,
        hidden: parse_usize("hidden")?,
        embed_dim: parse_usize("embed_dim")?,
        src_vocab_size: parse_usize("src_vocab_size")?,
        tgt_vocab_size: parse_usize("tgt_vocab_size")?,
        dropout_rate: get("dropout_rate")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad meta value for dropout_rate".into()))?,
    };
    cfg.validate().map_err(|e| Error::Checkpoint(format!("invalid config: {e}")))?;

    let expected = ModelParams::shape_table(&cfg);
    if order.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            order.len()
        )));
    }
    for (name, shape) in &expected {
        match tensors.get(name) {
            None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            _ => {}
        }
    }

    let mut take = |name: String| tensors.remove(&name).expect("validated above");
    let mut lstm = |prefix: &str, l: usize| LstmParams {
        w_in: take(format!("{prefix}.l{l}.w_in")),
        w_rec: take(format!("{prefix}.l{l}.w_rec")),
        bias: take(format!("{prefix}.l{l}.bias")),
    };
    let enc: Vec<LstmParams> = (0..cfg.layers).map(|l| lstm("enc", l)).collect();
    let dec: Vec<LstmParams> = (0..cfg.layers).map(|l| lstm("dec", l)).collect();
    let params = ModelParams {
        src_embed: take("src_embed".into()),
        tgt_embed: take("tgt_embed".into()),
        enc,
        dec,
        attn_general: take("attn.w_general".into()),
        attn_combine: take("attn.w_combine".into()),
        out_w: take("out.w".into()),
        out_b: take("out.b".into()),
        cfg,
    };
    Ok(Checkpoint {
        params,
        src_vocab_sha256: get("src_vocab_sha256")?.clone(),
        tgt_vocab_sha256: get("tgt_vocab_sha256")?.clone(),
    })
}
