//! Versioned text dump of a recommender.
//!
//! ```text
//! collab-recommender v1
//! label q3
//! kind noisy_greedy
//! density_sort true
//! normalize true
//! sigma 0.3125
//! ```
//!
//! Imitation models add `layers <widths...>` followed by one `weights` and one
//! `biases` line per layer; constant models add a `scores` line. Floats use
//! Rust's shortest round-trip formatting, so load/save is bit-exact.

use std::fmt::Display;
use std::io::{BufRead, Write};
use std::str::FromStr;

use super::mlp::{Layer, Mlp};
use super::{Preprocessing, Recommender, RecommenderKind};
use crate::error::{Error, Result};

pub const RECOMMENDER_FORMAT: &str = "collab-recommender v1";

pub fn write_recommender<W: Write>(mut out: W, rec: &Recommender) -> Result<()> {
    writeln!(out, "{RECOMMENDER_FORMAT}")?;
    if rec.label.contains(['\n', '\r']) {
        return Err(Error::Parameter("label must be a single line".into()));
    }
    writeln!(out, "label {}", rec.label)?;
    writeln!(out, "kind {}", rec.kind.tag())?;
    writeln!(out, "density_sort {}", rec.preprocessing.density_sort)?;
    writeln!(out, "normalize {}", rec.preprocessing.normalize)?;
    match &rec.kind {
        RecommenderKind::Imitation(mlp) => {
            write!(out, "layers")?;
            for s in mlp.sizes() {
                write!(out, " {s}")?;
            }
            writeln!(out)?;
            for layer in mlp.layers() {
                write_list(&mut out, "weights", &layer.weights)?;
                write_list(&mut out, "biases", &layer.biases)?;
            }
        }
        RecommenderKind::GreedyDensity => {}
        RecommenderKind::NoisyGreedy { sigma } => writeln!(out, "sigma {sigma}")?,
        RecommenderKind::Constant { scores } => write_list(&mut out, "scores", scores)?,
    }
    Ok(())
}

fn write_list<W: Write, T: Display>(out: &mut W, key: &str, xs: &[T]) -> Result<()> {
    write!(out, "{key}")?;
    for x in xs {
        write!(out, " {x}")?;
    }
    writeln!(out)?;
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<R>,
}

impl<R: BufRead> Lines<R> {
    fn next_line(&mut self) -> Result<String> {
        match self.inner.next() {
            Some(line) => Ok(line?),
            None => Err(Error::Parse("unexpected end of recommender file".into())),
        }
    }

    /// Reads `key rest...` and returns `rest`.
    fn field(&mut self, key: &str) -> Result<String> {
        let line = self.next_line()?;
        match line.split_once(' ') {
            Some((k, rest)) if k == key => Ok(rest.to_string()),
            _ if line == key => Ok(String::new()),
            _ => Err(Error::Parse(format!("expected `{key}`, found {line:?}"))),
        }
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Vec<T>> {
        let rest = self.field(key)?;
        rest.split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::Parse(format!("bad {key} entry {s:?}"))))
            .collect()
    }
}

fn parse_bool(s: &str) -> Result<bool> {
    s.parse()
        .map_err(|_| Error::Parse(format!("expected true/false, found {s:?}")))
}

pub fn read_recommender<R: BufRead>(input: R) -> Result<Recommender> {
    let mut lines = Lines {
        inner: input.lines(),
    };
    let header = lines.next_line()?;
    if header != RECOMMENDER_FORMAT {
        return Err(Error::Parse(format!(
            "unsupported recommender format {header:?}"
        )));
    }
    let label = lines.field("label")?;
    let kind_tag = lines.field("kind")?;
    let preprocessing = Preprocessing {
        density_sort: parse_bool(&lines.field("density_sort")?)?,
        normalize: parse_bool(&lines.field("normalize")?)?,
    };
    let kind = match kind_tag.as_str() {
        "imitation" => {
            let sizes: Vec<usize> = lines.list("layers")?;
            if sizes.len() < 2 {
                return Err(Error::Parse("need at least two layer widths".into()));
            }
            let mut layers = Vec::new();
            for pair in sizes.windows(2) {
                let weights: Vec<f32> = lines.list("weights")?;
                let biases: Vec<f32> = lines.list("biases")?;
                layers.push(Layer {
                    inputs: pair[0],
                    outputs: pair[1],
                    weights,
                    biases,
                });
            }
            let mlp = Mlp::from_layers(layers)
                .ok_or_else(|| Error::Parse("layer shapes do not match widths".into()))?;
            RecommenderKind::Imitation(mlp)
        }
        "greedy_density" => RecommenderKind::GreedyDensity,
        "noisy_greedy" => {
            let sigma = lines.field("sigma")?;
            let sigma = sigma
                .parse()
                .map_err(|_| Error::Parse(format!("bad sigma {sigma:?}")))?;
            RecommenderKind::NoisyGreedy { sigma }
        }
        "constant" => RecommenderKind::Constant {
            scores: lines.list("scores")?,
        },
        other => return Err(Error::Parse(format!("unknown recommender kind {other:?}"))),
    };
    Ok(Recommender {
        label,
        kind,
        preprocessing,
    })
}
