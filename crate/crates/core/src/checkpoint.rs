//! Model checkpoints.
//!
//! Layout: a UTF-8 header of newline-terminated lines, closed by `end`, then
//! the raw little-endian `f64` values of every tensor listed in the header,
//! in the listed order.
//!
//! ```text
//! maze-checkpoint 1
//! dtype f64-le
//! seed 42
//! input_dim 2
//! layers 2
//! linear 2 3
//! softmax
//! tensors 2
//! 0.weight 2 3
//! 0.bias 1 3
//! end
//! <48 bytes of f64 data>
//! ```

use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Model};
use crate::tensor::Tensor;

const MAGIC: &str = "maze-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &Model, seed: u64) -> Result<()> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str("dtype f64-le\n");
    header.push_str(&format!("seed {seed}\n"));
    header.push_str(&format!("input_dim {}\n", model.input_dim()));
    let specs = model.specs();
    header.push_str(&format!("layers {}\n", specs.len()));
    for s in &specs {
        header.push_str(&format!("{s}\n"));
    }
    let tensors = all_tensors(model);
    header.push_str(&format!("tensors {}\n", tensors.len()));
    for (name, t) in &tensors {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("{name} {}\n", dims.join(" ")));
    }
    header.push_str("end\n");
    w.write_all(header.as_bytes())?;
    for (_, t) in &tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn all_tensors(model: &Model) -> Vec<(String, &Tensor)> {
    let mut v = model.params();
    v.extend(model.buffers());
    v
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Checkpoint> {
    let mut lines = Vec::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("unexpected end of header"));
        }
        let line = line.trim_end_matches('\n').to_string();
        if line == "end" {
            break;
        }
        lines.push(line);
        if lines.len() > 100_000 {
            return Err(bad("header too long"));
        }
    }
    let mut it = lines.iter();
    let mut next = |what: &str| {
        it.next()
            .cloned()
            .ok_or_else(|| bad(format!("missing {what}")))
    };
    if next("magic")? != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    if next("dtype")? != "dtype f64-le" {
        return Err(bad("unsupported dtype"));
    }
    let seed = keyed(&next("seed")?, "seed")?;
    let input_dim = keyed(&next("input_dim")?, "input_dim")? as usize;
    let n_layers = keyed(&next("layers")?, "layers")? as usize;
    let mut specs = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        specs.push(parse_layer(&next("layer")?)?);
    }
    let n_tensors = keyed(&next("tensors")?, "tensors")? as usize;
    let mut shapes = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let line = next("tensor")?;
        let mut parts = line.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| bad("empty tensor line"))?
            .to_string();
        let dims = parts
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| bad(format!("bad dim in `{line}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        shapes.push((name, dims));
    }

    let mut model = Model::new(input_dim, &specs, &mut ChaCha8Rng::seed_from_u64(0))?;
    let n_params = model.params().len();
    let expected = n_params + model.buffers().len();
    if shapes.len() != expected {
        return Err(bad(format!(
            "architecture needs {expected} tensors, header lists {}",
            shapes.len()
        )));
    }
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut offset = 0;
    let mut fill = |name: &str, t: &mut Tensor, shape: &(String, Vec<usize>)| -> Result<()> {
        if shape.0 != name || shape.1 != t.shape() {
            return Err(bad(format!(
                "tensor `{}` {:?} does not match architecture `{name}` {:?}",
                shape.0,
                shape.1,
                t.shape()
            )));
        }
        for v in t.data_mut() {
            let bytes: [u8; 8] = data
                .get(offset..offset + 8)
                .ok_or_else(|| bad("truncated tensor data"))?
                .try_into()
                .expect("8 bytes");
            *v = f64::from_le_bytes(bytes);
            offset += 8;
        }
        Ok(())
    };
    for ((name, t), shape) in model.params_mut().into_iter().zip(&shapes) {
        fill(&name, t, shape)?;
    }
    for ((name, t), shape) in model.buffers_mut().into_iter().zip(&shapes[n_params..]) {
        fill(&name, t, shape)?;
    }
    if offset != data.len() {
        return Err(bad(format!("{} trailing bytes", data.len() - offset)));
    }
    Ok(Checkpoint { model, seed })
}

fn keyed(line: &str, key: &str) -> Result<u64> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(key) {
        return Err(bad(format!("expected `{key}`, found `{line}`")));
    }
    parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(format!("bad value in `{line}`")))
}

fn parse_layer(line: &str) -> Result<LayerSpec> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    let num = |i: usize| -> Result<f64> {
        parts
            .get(i)
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| bad(format!("bad layer line `{line}`")))
    };
    let int = |i: usize| -> Result<usize> {
        parts
            .get(i)
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| bad(format!("bad layer line `{line}`")))
    };
    match parts.first().copied() {
        Some("linear") => Ok(LayerSpec::linear(int(1)?, int(2)?)),
        Some("tanh") => Ok(LayerSpec::Tanh),
        Some("relu") => Ok(LayerSpec::Relu),
        Some("softmax") => Ok(LayerSpec::Softmax),
        Some("batchnorm") => Ok(LayerSpec::BatchNorm {
            features: int(1)?,
            momentum: num(2)?,
            eps: num(3)?,
        }),
        _ => Err(bad(format!("unknown layer `{line}`"))),
    }
}

pub fn save(path: impl AsRef<Path>, model: &Model, seed: u64) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, model, seed)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;

    fn sample_model() -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = Model::new(
            3,
            &[
                LayerSpec::linear(3, 4),
                LayerSpec::batch_norm(4),
                LayerSpec::Relu,
                LayerSpec::linear(4, 2),
                LayerSpec::Softmax,
            ],
            &mut rng,
        )
        .unwrap();
        for (_, b) in m.buffers_mut() {
            b.data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.1 + std::f64::consts::PI * *v);
        }
        m.set_mode(Mode::Train);
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = sample_model();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, 99).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.seed, 99);
        assert_eq!(back.model, m);
        let mut buf2 = Vec::new();
        write_checkpoint(&mut buf2, &back.model, 99).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn header_is_readable() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample_model(), 1).unwrap();
        let text = String::from_utf8_lossy(&buf[..200]);
        assert!(text.starts_with(
            "maze-checkpoint 1\ndtype f64-le\nseed 1\ninput_dim 3\nlayers 5\nlinear 3 4\n"
        ));
    }

    #[test]
    fn truncated_data_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample_model(), 1).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_checkpoint(&buf[..]),
            Err(Error::Checkpoint(_))
        ));
        assert!(read_checkpoint(&b"garbage\nend\n"[..]).is_err());
    }
}
