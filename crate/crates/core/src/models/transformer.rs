use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normal, ssf_hook, Bindings, ForwardCtx, ForwardOut, Model, ModelError, Param, Result};
use crate::peft::{cayley_blocks, oft_name, PeftError};
use crate::tensor::{scaled_dot_attention, Real, Tape, Tensor, Var};

const INIT_STD: f32 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecTransformerConfig {
    pub n_mels: usize,
    /// Input width; sizes the positional table.
    pub n_frames: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
}

impl Default for SpecTransformerConfig {
    fn default() -> Self {
        Self { n_mels: 64, n_frames: 157, patch: 16, embed_dim: 64, heads: 4, depth: 4, mlp_ratio: 4, n_classes: 31 }
    }
}

impl SpecTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.patch == 0 || self.n_mels < self.patch || self.n_frames < self.patch {
            return bad(format!("{}x{} input is smaller than one {} patch", self.n_mels, self.n_frames, self.patch));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.n_classes < 2 {
            return bad("depth, mlp_ratio must be positive and n_classes >= 2".into());
        }
        Ok(())
    }

    /// Patch grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.n_mels / self.patch, self.n_frames / self.patch)
    }

    pub fn n_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// Cuts `B × 1 × M × T` spectrograms into non-overlapping `patch × patch`
/// tiles, row-major over the tile grid, each flattened row-major. Trailing
/// rows and columns that do not fill a tile are dropped. Output is
/// `B × N × patch²`.
pub fn patchify<T: Real>(x: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 1 || patch == 0 || s[2] < patch || s[3] < patch {
        return Err(ModelError::Input { got: s.to_vec(), msg: format!("need B x 1 x M x T with M, T >= {patch}") });
    }
    let (b, m, t) = (s[0], s[2], s[3]);
    let (gr, gc) = (m / patch, t / patch);
    let pp = patch * patch;
    let d = x.data();
    let mut out = Vec::with_capacity(b * gr * gc * pp);
    for bi in 0..b {
        let base = bi * m * t;
        for r in 0..gr {
            for c in 0..gc {
                for i in 0..patch {
                    let row = base + (r * patch + i) * t + c * patch;
                    out.extend_from_slice(&d[row..row + patch]);
                }
            }
        }
    }
    Ok(Tensor::new(&[b, gr * gc, pp], out)?)
}

fn linear_params(p: &mut IndexMap<String, Param>, name: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng) {
    p.insert(format!("{name}.weight"), Param::weight(normal(&[out, inp], INIT_STD, rng)));
    p.insert(format!("{name}.bias"), Param::weight(Tensor::zeros(&[out])));
}

fn norm_params(p: &mut IndexMap<String, Param>, name: &str, d: usize) {
    p.insert(format!("{name}.weight"), Param::weight(Tensor::ones(&[d])));
    p.insert(format!("{name}.bias"), Param::weight(Tensor::zeros(&[d])));
}

pub(super) fn init(c: &SpecTransformerConfig, rng: &mut ChaCha8Rng) -> Result<IndexMap<String, Param>> {
    c.validate()?;
    let d = c.embed_dim;
    let mut p = IndexMap::new();
    linear_params(&mut p, "patch_embed", d, c.patch * c.patch, rng);
    p.insert("cls_token".into(), Param::weight(normal(&[1, 1, d], INIT_STD, rng)));
    p.insert("pos_embed".into(), Param::weight(normal(&[1, c.n_patches() + 1, d], INIT_STD, rng)));
    for i in 0..c.depth {
        let blk = format!("blocks.{i}");
        norm_params(&mut p, &format!("{blk}.ln1"), d);
        for proj in ["q", "k", "v", "o"] {
            linear_params(&mut p, &format!("{blk}.attn.{proj}"), d, d, rng);
        }
        norm_params(&mut p, &format!("{blk}.ln2"), d);
        linear_params(&mut p, &format!("{blk}.mlp.fc1"), c.mlp_hidden(), d, rng);
        linear_params(&mut p, &format!("{blk}.mlp.fc2"), d, c.mlp_hidden(), rng);
    }
    norm_params(&mut p, "norm", d);
    linear_params(&mut p, "head", c.n_classes, d, rng);
    Ok(p)
}

pub(super) fn ssf_points(c: &SpecTransformerConfig) -> Vec<(String, usize)> {
    let d = c.embed_dim;
    let mut v = vec![("patch_embed".to_string(), d)];
    for i in 0..c.depth {
        let blk = format!("blocks.{i}");
        v.push((format!("{blk}.ln1"), d));
        for proj in ["q", "k", "v", "o"] {
            v.push((format!("{blk}.attn.{proj}"), d));
        }
        v.push((format!("{blk}.ln2"), d));
        v.push((format!("{blk}.mlp.fc1"), c.mlp_hidden()));
        v.push((format!("{blk}.mlp.fc2"), d));
    }
    v.push(("norm".into(), d));
    v
}

fn peft_err(e: PeftError) -> ModelError {
    match e {
        PeftError::Tensor(t) => ModelError::Tensor(t),
        PeftError::Model(m) => m,
        other => ModelError::Config(other.to_string()),
    }
}

struct Block<'a, T: Real> {
    model: &'a Model,
    tape: &'a mut Tape<T>,
    b: &'a Bindings,
    prefix: String,
    index: usize,
}

impl<T: Real> Block<'_, T> {
    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    fn norm(&mut self, x: Var, which: &str) -> Result<Var> {
        let n = self.name(which);
        let y = self.tape.layer_norm(x, self.b.get(&format!("{n}.weight"))?, self.b.get(&format!("{n}.bias"))?, T::of(LN_EPS))?;
        ssf_hook(self.model, self.tape, self.b, &n, y, 2)
    }

    /// Linear layer with the OFT rotation (attention projections only) and
    /// the scale-shift hook.
    fn linear(&mut self, x: Var, layer: &str, oft_proj: Option<&str>) -> Result<Var> {
        let n = self.name(layer);
        let mut w = self.b.get(&format!("{n}.weight"))?;
        if let (Some(opts), Some(proj)) = (self.model.adapters().oft, oft_proj) {
            let d = self.tape.shape(w)[1];
            let r = cayley_blocks(self.tape, self.b.get(&oft_name(self.index, proj))?, d / opts.blocks).map_err(peft_err)?;
            w = self.tape.matmul(w, r)?;
        }
        let y = self.tape.linear(x, w, Some(self.b.get(&format!("{n}.bias"))?))?;
        ssf_hook(self.model, self.tape, self.b, &n, y, 2)
    }

    fn ia3(&mut self, x: Var, which: &str) -> Result<Var> {
        let l = self.b.get(&format!("ia3.blocks.{}.{which}", self.index))?;
        let w = self.tape.shape(l)[0];
        let l = self.tape.reshape(l, &[1, 1, w])?;
        Ok(self.tape.mul(x, l)?)
    }

    fn run(&mut self, x: Var, heads: usize) -> Result<Var> {
        let ia3 = self.model.adapters().ia3;
        let h = self.norm(x, "ln1")?;
        let mut q = self.linear(h, "attn.q", Some("q"))?;
        let k = self.linear(h, "attn.k", Some("k"))?;
        let v = self.linear(h, "attn.v", Some("v"))?;
        let scales = match ia3 {
            Some(opts) => {
                if opts.scale_query {
                    q = self.ia3(q, "l_q")?;
                }
                let lk = self.b.get(&format!("ia3.blocks.{}.l_k", self.index))?;
                let lv = self.b.get(&format!("ia3.blocks.{}.l_v", self.index))?;
                Some((lk, lv))
            }
            None => None,
        };
        let (a, _) = scaled_dot_attention(self.tape, q, k, v, heads, scales)?;
        let o = self.linear(a, "attn.o", Some("o"))?;
        let x = self.tape.add(x, o)?;
        let h = self.norm(x, "ln2")?;
        let h = self.linear(h, "mlp.fc1", None)?;
        let mut h = self.tape.gelu(h)?;
        if ia3.is_some() {
            h = self.ia3(h, "l_ff")?;
        }
        let h = self.linear(h, "mlp.fc2", None)?;
        Ok(self.tape.add(x, h)?)
    }
}

pub(super) fn forward<T: Real>(
    model: &Model,
    c: &SpecTransformerConfig,
    tape: &mut Tape<T>,
    b: &Bindings,
    input: Var,
    _ctx: &mut ForwardCtx,
) -> Result<ForwardOut<T>> {
    let s = tape.shape(input).to_vec();
    model.check_input(&s, c.n_mels, c.patch)?;
    if s[3] / c.patch != c.grid().1 {
        return Err(ModelError::Input {
            got: s,
            msg: format!("{} time patches do not match the positional table of {}", tape.shape(input)[3] / c.patch, c.grid().1),
        });
    }
    let bsz = s[0];
    let d = c.embed_dim;
    let patches = patchify(tape.value(input), c.patch)?;
    let patches = tape.constant(patches);
    let x = tape.linear(patches, b.get("patch_embed.weight")?, Some(b.get("patch_embed.bias")?))?;
    let x = ssf_hook(model, tape, b, "patch_embed", x, 2)?;
    let cls = tape.broadcast_to(b.get("cls_token")?, &[bsz, 1, d])?;
    let x = tape.concat(cls, x, 1)?;
    let mut x = tape.add(x, b.get("pos_embed")?)?;
    for i in 0..c.depth {
        let mut blk = Block { model, tape: &mut *tape, b, prefix: format!("blocks.{i}"), index: i };
        x = blk.run(x, c.heads)?;
    }
    let x = tape.layer_norm(x, b.get("norm.weight")?, b.get("norm.bias")?, T::of(LN_EPS))?;
    let x = ssf_hook(model, tape, b, "norm", x, 2)?;
    let features = tape.select(x, 1, 0)?;
    let logits = tape.linear(features, b.get("head.weight")?, Some(b.get("head.bias")?))?;
    Ok(ForwardOut { logits, features, bn_stats: Vec::new() })
}
