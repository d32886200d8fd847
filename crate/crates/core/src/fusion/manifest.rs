//! Text record for a fused model: checkpoint digests plus router weights.
//!
//! ```text
//! coop-fused 1
//! mode soft
//! router linear
//! input specialist_mean
//! experts 3
//! hidden 32
//! specialist <hex digest> [path]
//! base <hex digest> [path]
//! array w_r 3 32
//! <values, space separated>
//! ```
//!
//! `specialist` lines appear once per expert, in order; `base` is optional.
//! Floats are written in shortest round-trip form.

use std::path::Path;

use super::{FusedModel, FusionMode, InputMode, Router, RouterArray, RouterKind};
use crate::error::{CoopError, Result};
use crate::model::{Checkpoint, Digest};

const HEADER: &str = "coop-fused 1";
const MAX_ARRAY_LEN: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct FusedManifest {
    pub mode: FusionMode,
    pub router: Router,
    pub specialists: Vec<(Digest, Option<String>)>,
    pub base: Option<(Digest, Option<String>)>,
}

fn ref_line(key: &str, (d, path): &(Digest, Option<String>)) -> String {
    match path {
        Some(p) => format!("{key} {d} {p}\n"),
        None => format!("{key} {d}\n"),
    }
}

impl FusedManifest {
    pub fn to_text(&self) -> String {
        let r = &self.router;
        let mut out = format!(
            "{HEADER}\nmode {}\nrouter {}\ninput {}\nexperts {}\nhidden {}\n",
            self.mode, r.kind, r.input_mode, r.n_experts, r.hidden_dim
        );
        for s in &self.specialists {
            out.push_str(&ref_line("specialist", s));
        }
        if let Some(b) = &self.base {
            out.push_str(&ref_line("base", b));
        }
        for a in &r.arrays {
            let dims: Vec<String> = a.shape.iter().map(|d| d.to_string()).collect();
            out.push_str(&format!("array {} {}\n", a.name, dims.join(" ")));
            let vals: Vec<String> = a.data.iter().map(|v| v.to_string()).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, message: String| CoopError::Parse { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        match lines.next() {
            Some((_, HEADER)) => {}
            Some((n, l)) => return Err(err(n, format!("expected `{HEADER}`, found `{l}`"))),
            None => return Err(err(0, "empty manifest".into())),
        }
        let (mut mode, mut kind, mut input, mut experts, mut hidden) = (None, None, None, None, None);
        let mut specialists = Vec::new();
        let mut base = None;
        let mut arrays = Vec::new();
        let parse_ref = |n: usize, rest: &[&str]| -> Result<(Digest, Option<String>)> {
            let hex = rest.first().ok_or_else(|| err(n, "missing digest".into()))?;
            let d = Digest::from_hex(hex).map_err(|e| err(n, e.to_string()))?;
            Ok((d, (rest.len() > 1).then(|| rest[1..].join(" "))))
        };
        while let Some((n, line)) = lines.next() {
            let words: Vec<&str> = line.split_whitespace().collect();
            let (key, rest) = (words[0], &words[1..]);
            let one = || -> Result<&str> {
                match rest {
                    [v] => Ok(v),
                    _ => Err(err(n, format!("`{key}` takes exactly one value"))),
                }
            };
            let count = |s: &str| s.parse::<usize>().map_err(|_| err(n, format!("`{s}` is not a count")));
            match key {
                "mode" => mode = Some(one()?.parse::<FusionMode>().map_err(|e| err(n, e.to_string()))?),
                "router" => kind = Some(one()?.parse::<RouterKind>().map_err(|e| err(n, e.to_string()))?),
                "input" => input = Some(one()?.parse::<InputMode>().map_err(|e| err(n, e.to_string()))?),
                "experts" => experts = Some(count(one()?)?),
                "hidden" => hidden = Some(count(one()?)?),
                "specialist" => specialists.push(parse_ref(n, rest)?),
                "base" => {
                    if base.is_some() {
                        return Err(err(n, "duplicate base line".into()));
                    }
                    base = Some(parse_ref(n, rest)?);
                }
                "array" => {
                    let name = rest.first().ok_or_else(|| err(n, "array needs a name".into()))?.to_string();
                    let shape = rest[1..].iter().map(|s| count(s)).collect::<Result<Vec<_>>>()?;
                    let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).filter(|&l| l <= MAX_ARRAY_LEN);
                    let len = len.ok_or_else(|| err(n, "array too large".into()))?;
                    let (vn, vline) = lines.next().ok_or_else(|| err(n, format!("array `{name}` has no values")))?;
                    let data = vline
                        .split_whitespace()
                        .map(|v| v.parse::<f64>().map_err(|_| err(vn, format!("`{v}` is not a number"))))
                        .collect::<Result<Vec<_>>>()?;
                    if data.len() != len {
                        return Err(err(vn, format!("array `{name}` expects {len} values, found {}", data.len())));
                    }
                    arrays.push(RouterArray { name, shape, data });
                }
                other => return Err(err(n, format!("unknown key `{other}`"))),
            }
        }
        let missing = |what: &str| err(0, format!("missing `{what}` line"));
        let router = Router {
            kind: kind.ok_or_else(|| missing("router"))?,
            input_mode: input.ok_or_else(|| missing("input"))?,
            n_experts: experts.ok_or_else(|| missing("experts"))?,
            hidden_dim: hidden.ok_or_else(|| missing("hidden"))?,
            arrays,
        };
        router.validate().map_err(|e| err(0, e.to_string()))?;
        if specialists.len() != router.n_experts {
            return Err(err(0, format!("{} specialist lines for {} experts", specialists.len(), router.n_experts)));
        }
        Ok(Self { mode: mode.ok_or_else(|| missing("mode"))?, router, specialists, base })
    }

    /// Loads the referenced checkpoints (paths relative to `dir`) and checks
    /// each against its recorded digest.
    pub fn load_model(&self, dir: &Path) -> Result<FusedModel> {
        let load = |(digest, path): &(Digest, Option<String>)| -> Result<Checkpoint> {
            let path = path
                .as_ref()
                .ok_or_else(|| CoopError::InvalidInput(format!("no path recorded for checkpoint {digest}")))?;
            let ckpt = Checkpoint::load(&dir.join(path))?;
            if ckpt.digest() != *digest {
                return Err(CoopError::BaseMismatch { expected: digest.to_hex(), found: ckpt.digest().to_hex() });
            }
            Ok(ckpt)
        };
        let specialists = self.specialists.iter().map(load).collect::<Result<Vec<_>>>()?;
        let base = self.base.as_ref().map(load).transpose()?;
        FusedModel::new(specialists, self.router.clone(), self.mode, base)
    }
}
