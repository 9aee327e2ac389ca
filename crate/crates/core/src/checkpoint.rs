//! Plain-text model checkpoints.
//!
//! ```text
//! adaptive-tbptt-checkpoint 1
//! arch vocab=<V> emb=<E> cell=<lstm|simple-tanh|simple-identity> hidden=<d1>,<d2>,...
//! tensor <name> <dim> [<dim>]
//! <one line per row, values separated by single spaces>
//! ...
//! end
//! ```
//!
//! Tensors appear in the canonical order of [`ModelParams::named_shapes`].
//! Values are written in shortest round-trip scientific notation, so a
//! save/load cycle reproduces every bit.

use std::fmt::Write as _;
use std::path::Path;

use crate::cells::Activation;
use crate::error::{Error, Result};
use crate::model::{Architecture, CellKind, ModelParams};

const MAGIC: &str = "adaptive-tbptt-checkpoint 1";

fn cell_name(kind: CellKind) -> &'static str {
    match kind {
        CellKind::Lstm => "lstm",
        CellKind::Simple(Activation::Tanh) => "simple-tanh",
        CellKind::Simple(Activation::Identity) => "simple-identity",
    }
}

pub fn to_string(model: &ModelParams) -> String {
    let arch = model.architecture();
    let mut out = String::new();
    writeln!(out, "{MAGIC}").unwrap();
    let hidden: Vec<String> = arch.hidden.iter().map(|d| d.to_string()).collect();
    writeln!(
        out,
        "arch vocab={} emb={} cell={} hidden={}",
        arch.vocab,
        arch.d_emb,
        cell_name(arch.cell),
        hidden.join(",")
    )
    .unwrap();
    for ((name, shape), data) in model.named_shapes().into_iter().zip(model.slices()) {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        writeln!(out, "tensor {name} {}", dims.join(" ")).unwrap();
        let width = *shape.last().unwrap_or(&1);
        for row in data.chunks(width.max(1)) {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", vals.join(" ")).unwrap();
        }
    }
    writeln!(out, "end").unwrap();
    out
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        line,
        msg: msg.into(),
    }
}

fn parse_arch(line_no: usize, line: &str) -> Result<Architecture> {
    let mut vocab = None;
    let mut emb = None;
    let mut cell = None;
    let mut hidden = None;
    let mut parts = line.split_whitespace();
    if parts.next() != Some("arch") {
        return Err(perr(line_no, "expected `arch` line"));
    }
    for kv in parts {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| perr(line_no, format!("malformed field `{kv}`")))?;
        let num = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| perr(line_no, format!("bad integer `{v}` for `{k}`")))
        };
        match k {
            "vocab" => vocab = Some(num(v)?),
            "emb" => emb = Some(num(v)?),
            "cell" => {
                cell = Some(match v {
                    "lstm" => CellKind::Lstm,
                    "simple-tanh" => CellKind::Simple(Activation::Tanh),
                    "simple-identity" => CellKind::Simple(Activation::Identity),
                    other => return Err(perr(line_no, format!("unknown cell `{other}`"))),
                })
            }
            "hidden" => {
                hidden = Some(v.split(',').map(num).collect::<Result<Vec<_>>>()?);
            }
            other => return Err(perr(line_no, format!("unknown field `{other}`"))),
        }
    }
    let missing = |f: &str| perr(line_no, format!("missing `{f}`"));
    Ok(Architecture {
        vocab: vocab.ok_or_else(|| missing("vocab"))?,
        d_emb: emb.ok_or_else(|| missing("emb"))?,
        cell: cell.ok_or_else(|| missing("cell"))?,
        hidden: hidden.ok_or_else(|| missing("hidden"))?,
    })
}

pub fn from_str(text: &str) -> Result<ModelParams> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
    match lines.next() {
        Some((_, l)) if l == MAGIC => {}
        _ => return Err(perr(1, format!("expected header `{MAGIC}`"))),
    }
    let (n, arch_line) = lines.next().ok_or_else(|| perr(2, "missing arch line"))?;
    let arch = parse_arch(n, arch_line)?;
    let mut model = ModelParams::zeros(&arch)?;
    let shapes = model.named_shapes();
    let mut flat = Vec::with_capacity(model.num_params());
    for (name, shape) in &shapes {
        let (n, header) = lines
            .next()
            .ok_or_else(|| perr(0, format!("missing tensor `{name}`")))?;
        let expect = format!(
            "tensor {name} {}",
            shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" ")
        );
        if header != expect {
            return Err(perr(n, format!("expected `{expect}`, found `{header}`")));
        }
        let width = *shape.last().unwrap_or(&1);
        let rows = if shape.len() == 2 { shape[0] } else { 1 };
        for _ in 0..rows {
            let (n, row) = lines
                .next()
                .ok_or_else(|| perr(0, format!("tensor `{name}` truncated")))?;
            let vals = row
                .split(' ')
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| perr(n, format!("bad number `{v}` in `{name}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != width {
                return Err(perr(n, format!("row of {} values, expected {width}", vals.len())));
            }
            flat.extend(vals);
        }
    }
    match lines.next() {
        Some((_, "end")) => {}
        Some((n, other)) => return Err(perr(n, format!("expected `end`, found `{other}`"))),
        None => return Err(perr(0, "missing `end`")),
    }
    model.assign_flat(&flat)?;
    Ok(model)
}

pub fn save(model: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_string(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn small_model_layout() {
        let arch = Architecture::simple(2, 1, &[1], Activation::Tanh);
        let mut m = ModelParams::zeros(&arch).unwrap();
        m.assign_flat(&[0.5, -1.0, 0.25, 3.0, 1e-7, 2.0, 0.0, -0.0, 4.0]).unwrap();
        let text = to_string(&m);
        assert_eq!(
            text,
            "adaptive-tbptt-checkpoint 1\n\
             arch vocab=2 emb=1 cell=simple-tanh hidden=1\n\
             tensor embedding 2 1\n5e-1\n-1e0\n\
             tensor layer0.W 1 1\n2.5e-1\n\
             tensor layer0.U 1 1\n3e0\n\
             tensor layer0.b 1\n1e-7\n\
             tensor output.W 2 1\n2e0\n0e0\n\
             tensor output.b 2\n-0e0 4e0\nend\n"
        );
        let back = from_str(&text).unwrap();
        assert_eq!(back, m);
        assert!(back.out_b[0].is_sign_negative());
    }

    #[test]
    fn rejects_corrupt_files() {
        let arch = Architecture::lstm(3, 2, &[2]);
        let m = ModelParams::zeros(&arch).unwrap();
        let text = to_string(&m);
        assert!(from_str(&text.replace("lstm", "gru")).is_err());
        assert!(from_str(&text.replace("end\n", "")).is_err());
        assert!(from_str(&text.replacen("0e0", "zero", 1)).is_err());
        assert!(from_str("nonsense").is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = SeededRng::new(1);
        let m = ModelParams::init(&Architecture::lstm(8, 6, &[5, 5]), &mut rng).unwrap();
        save(&m, &path).unwrap();
        assert_eq!(load(&path).unwrap(), m);
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(seed in any::<u64>(), scale in 1e-300f64..1e300) {
            let mut rng = SeededRng::new(seed);
            let arch = Architecture::lstm(4, 3, &[2, 3]);
            let mut m = ModelParams::zeros(&arch).unwrap();
            for s in m.slices_mut() {
                s.iter_mut().for_each(|v| *v = rng.normal() * scale);
            }
            let back = from_str(&to_string(&m)).unwrap();
            let a: Vec<u64> = m.flatten().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.flatten().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
