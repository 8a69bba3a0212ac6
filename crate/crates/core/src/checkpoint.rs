//! Versioned text checkpoint format.
//!
//! ```text
//! safeswarm-checkpoint 1
//! seed <u64>
//! iteration <u64>
//! mlp <name> <d0> <d1> ... <dn>
//! layer <index> <out> <in>
//! <in weights>            (one line per output row, row-major)
//! <out biases>            (one line)
//! ...                     (one layer block per layer)
//! vector <name> <len>
//! <len values>            (one line, may be empty)
//! scalar <name> <u64>
//! end
//! ```
//!
//! Values are written with `{:e}`, which round-trips every `f64` exactly, so a
//! save/load cycle is lossless and repeated saves are byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::MlpParams;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "safeswarm-checkpoint";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub seed: u64,
    pub iteration: u64,
    pub mlps: Vec<(String, MlpParams)>,
    pub vectors: Vec<(String, Vec<f64>)>,
    pub scalars: Vec<(String, u64)>,
}

fn join(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{v:e}").expect("write to string");
    }
    s
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(Error::Checkpoint(format!("invalid entry name {name:?}")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn mlp(&self, name: &str) -> Result<&MlpParams> {
        self.mlps
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Checkpoint(format!("missing mlp {name}")))
    }

    pub fn vector(&self, name: &str) -> Result<&[f64]> {
        self.vectors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("missing vector {name}")))
    }

    pub fn scalar(&self, name: &str) -> Result<u64> {
        self.scalars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Checkpoint(format!("missing scalar {name}")))
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        let w = &mut out;
        let _ = writeln!(w, "{MAGIC} {FORMAT_VERSION}");
        let _ = writeln!(w, "seed {}", self.seed);
        let _ = writeln!(w, "iteration {}", self.iteration);
        for (name, net) in &self.mlps {
            check_name(name)?;
            let dims: Vec<String> = net.dims.iter().map(ToString::to_string).collect();
            let _ = writeln!(w, "mlp {name} {}", dims.join(" "));
            for layer in 0..net.num_layers() {
                let (n_in, n_out) = (net.dims[layer], net.dims[layer + 1]);
                let (wr, br) = net.layer_range(layer);
                let _ = writeln!(w, "layer {layer} {n_out} {n_in}");
                for row in net.params[wr].chunks(n_in) {
                    let _ = writeln!(w, "{}", join(row));
                }
                let _ = writeln!(w, "{}", join(&net.params[br]));
            }
        }
        for (name, v) in &self.vectors {
            check_name(name)?;
            let _ = writeln!(w, "vector {name} {}", v.len());
            let _ = writeln!(w, "{}", join(v));
        }
        for (name, v) in &self.scalars {
            check_name(name)?;
            let _ = writeln!(w, "scalar {name} {v}");
        }
        let _ = writeln!(w, "end");
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("unexpected end of file, expected {what}")))
        };
        let header = next("header")?;
        if header != format!("{MAGIC} {FORMAT_VERSION}") {
            return Err(Error::Checkpoint(format!("unsupported header {header:?}")));
        }
        let seed = parse_keyed(next("seed")?, "seed")?;
        let iteration = parse_keyed(next("iteration")?, "iteration")?;
        let mut ck = Checkpoint {
            seed,
            iteration,
            ..Default::default()
        };
        loop {
            let line = next("section")?;
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("end") => break,
                Some("mlp") => {
                    let name = parts.next().ok_or_else(|| bad(line))?.to_string();
                    let dims: Vec<usize> = parts.map(parse_num).collect::<Result<_>>()?;
                    let mut net = MlpParams::zeros(&dims)?;
                    for layer in 0..net.num_layers() {
                        let (n_in, n_out) = (dims[layer], dims[layer + 1]);
                        let head = next("layer")?;
                        if head != format!("layer {layer} {n_out} {n_in}") {
                            return Err(bad(head));
                        }
                        let (wr, br) = net.layer_range(layer);
                        for o in 0..n_out {
                            let row = parse_values(next("weights")?, n_in)?;
                            let start = wr.start + o * n_in;
                            net.params[start..start + n_in].copy_from_slice(&row);
                        }
                        let bias = parse_values(next("biases")?, n_out)?;
                        net.params[br].copy_from_slice(&bias);
                    }
                    ck.mlps.push((name, net));
                }
                Some("vector") => {
                    let name = parts.next().ok_or_else(|| bad(line))?.to_string();
                    let len = parse_num(parts.next().ok_or_else(|| bad(line))?)?;
                    let values = parse_values(next("vector values")?, len)?;
                    ck.vectors.push((name, values));
                }
                Some("scalar") => {
                    let name = parts.next().ok_or_else(|| bad(line))?.to_string();
                    let v = parts
                        .next()
                        .ok_or_else(|| bad(line))?
                        .parse()
                        .map_err(|_| bad(line))?;
                    ck.scalars.push((name, v));
                }
                _ => return Err(bad(line)),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn bad(line: &str) -> Error {
    Error::Checkpoint(format!("unexpected line {line:?}"))
}

fn parse_keyed(line: &str, key: &str) -> Result<u64> {
    line.strip_prefix(key)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| bad(line))
}

fn parse_num(s: &str) -> Result<usize> {
    s.parse().map_err(|_| bad(s))
}

fn parse_values(line: &str, expected: usize) -> Result<Vec<f64>> {
    let values: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| bad(line)))
        .collect::<Result<_>>()?;
    if values.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} values, found {}",
            values.len()
        )));
    }
    Ok(values)
}
