//! Patch-token transformer producing one embedding row per image patch.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Param, Tape, Tensor, ValueId};

use super::{prefixed, Linear, NamedParams};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct VitConfig {
    pub input_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub blocks: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig { input_size: 32, patch: 8, dim: 64, blocks: 2 }
    }
}

impl VitConfig {
    pub fn tokens(&self) -> usize {
        (self.input_size / self.patch) * (self.input_size / self.patch)
    }
}

/// One embedding row per patch, in raster order of patches.
#[derive(Debug, Clone, Copy)]
pub struct TokenMatrix {
    pub tokens: ValueId,
    pub n: usize,
    pub d: usize,
}

// ── Patch embedding ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub patch: usize,
    pub proj: Linear,
    /// Learned positional table, one row per patch position (N×d).
    pub pos: Param,
}

impl PatchEmbed {
    pub fn new(cfg: &VitConfig, rng: &mut ChaCha20Rng) -> Self {
        let in_dim = 3 * cfg.patch * cfg.patch;
        PatchEmbed {
            patch: cfg.patch,
            proj: Linear::new(in_dim, cfg.dim, rng),
            pos: Param::new(Tensor::randn(vec![cfg.tokens(), cfg.dim], 0.02, rng)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, image: ValueId) -> Result<TokenMatrix> {
        let patches = tape.patchify(image, self.patch)?;
        let projected = self.proj.forward(tape, patches)?;
        let pos = tape.param(&self.pos);
        let tokens = tape.add(projected, pos)?;
        let shape = tape.shape(tokens).to_vec();
        Ok(TokenMatrix { tokens, n: shape[0], d: shape[1] })
    }

    fn named(&self) -> Vec<(String, Param)> {
        let mut out = self.proj.named("proj");
        out.push(("pos".into(), self.pos.clone()));
        out
    }
}

// ── Transformer block ───────────────────────────────────────────────────

/// Pre-norm block: x + Attn(LN(x)), then x + Mlp(LN(x)).
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1_gamma: Param,
    pub ln1_beta: Param,
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub wo: Param,
    pub ln2_gamma: Param,
    pub ln2_beta: Param,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl TransformerBlock {
    pub fn new(dim: usize, rng: &mut ChaCha20Rng) -> Self {
        let std = (1.0 / dim as f64).sqrt();
        let proj = |rng: &mut ChaCha20Rng| Param::new(Tensor::randn(vec![dim, dim], std, rng));
        TransformerBlock {
            ln1_gamma: Param::new(Tensor::ones(vec![dim])),
            ln1_beta: Param::new(Tensor::zeros(vec![dim])),
            wq: proj(rng),
            wk: proj(rng),
            wv: proj(rng),
            wo: proj(rng),
            ln2_gamma: Param::new(Tensor::ones(vec![dim])),
            ln2_beta: Param::new(Tensor::zeros(vec![dim])),
            mlp_in: Linear::new(dim, 2 * dim, rng),
            mlp_out: Linear::new(2 * dim, dim, rng),
        }
    }

    /// Returns (block output, attention weight matrix) so callers can check
    /// the softmax rows.
    pub fn forward_detail(&self, tape: &mut Tape, x: ValueId) -> Result<(ValueId, ValueId)> {
        let d = tape.shape(x)[1];
        let g1 = tape.param(&self.ln1_gamma);
        let b1 = tape.param(&self.ln1_beta);
        let normed = tape.layer_norm(x, g1, b1, LN_EPS)?;

        let wq = tape.param(&self.wq);
        let wk = tape.param(&self.wk);
        let wv = tape.param(&self.wv);
        let wo = tape.param(&self.wo);
        let q = tape.matmul(normed, wq)?;
        let k = tape.matmul(normed, wk)?;
        let v = tape.matmul(normed, wv)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
        let attn = tape.softmax_rows(scaled)?;
        let mixed = tape.matmul(attn, v)?;
        let proj = tape.matmul(mixed, wo)?;
        let x = tape.add(x, proj)?;

        let g2 = tape.param(&self.ln2_gamma);
        let b2 = tape.param(&self.ln2_beta);
        let normed = tape.layer_norm(x, g2, b2, LN_EPS)?;
        let hidden = self.mlp_in.forward(tape, normed)?;
        let hidden = tape.relu(hidden)?;
        let mlp = self.mlp_out.forward(tape, hidden)?;
        let out = tape.add(x, mlp)?;
        Ok((out, attn))
    }

    fn named(&self) -> Vec<(String, Param)> {
        let mut out = vec![
            ("ln1_gamma".into(), self.ln1_gamma.clone()),
            ("ln1_beta".into(), self.ln1_beta.clone()),
            ("wq".into(), self.wq.clone()),
            ("wk".into(), self.wk.clone()),
            ("wv".into(), self.wv.clone()),
            ("wo".into(), self.wo.clone()),
            ("ln2_gamma".into(), self.ln2_gamma.clone()),
            ("ln2_beta".into(), self.ln2_beta.clone()),
        ];
        out.extend(self.mlp_in.named("mlp_in"));
        out.extend(self.mlp_out.named("mlp_out"));
        out
    }
}

// ── Full model ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TinyViT {
    pub cfg: VitConfig,
    pub patch_embed: PatchEmbed,
    pub blocks: Vec<TransformerBlock>,
}

impl TinyViT {
    pub fn new(cfg: VitConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        if cfg.input_size % cfg.patch != 0 {
            return Err(Error::Config(format!(
                "input size {} not divisible by patch size {}",
                cfg.input_size, cfg.patch
            )));
        }
        Ok(TinyViT {
            cfg,
            patch_embed: PatchEmbed::new(&cfg, rng),
            blocks: (0..cfg.blocks).map(|_| TransformerBlock::new(cfg.dim, rng)).collect(),
        })
    }

    pub fn forward(&self, tape: &mut Tape, image: ValueId) -> Result<TokenMatrix> {
        Ok(self.forward_detail(tape, image)?.0)
    }

    /// Also returns each block's attention weights.
    pub fn forward_detail(
        &self,
        tape: &mut Tape,
        image: ValueId,
    ) -> Result<(TokenMatrix, Vec<ValueId>)> {
        let mut tok = self.patch_embed.forward(tape, image)?;
        let mut attns = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, attn) = block.forward_detail(tape, tok.tokens)?;
            tok.tokens = next;
            attns.push(attn);
        }
        Ok((tok, attns))
    }
}

impl NamedParams for TinyViT {
    fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = prefixed("patch_embed", self.patch_embed.named());
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(prefixed(&format!("block{i}"), b.named()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(5)
    }

    fn random_image(rng: &mut ChaCha20Rng) -> Tensor {
        Tensor::randn(vec![3, 32, 32], 1.0, rng)
    }

    #[test]
    fn output_shape_is_tokens_by_dim() {
        let mut r = rng();
        let vit = TinyViT::new(VitConfig::default(), &mut r).unwrap();
        let img = random_image(&mut r);
        let mut tape = Tape::new();
        let x = tape.input(&img);
        let tok = vit.forward(&mut tape, x).unwrap();
        assert_eq!((tok.n, tok.d), (16, 64));
        assert_eq!(tape.shape(tok.tokens), &[16, 64]);
    }

    #[test]
    fn zeroed_projection_and_positions_give_zero_tokens() {
        let mut r = rng();
        let cfg = VitConfig::default();
        let pe = PatchEmbed::new(&cfg, &mut r);
        pe.proj.w.set_data(&vec![0.0; pe.proj.w.numel()]);
        pe.pos.set_data(&vec![0.0; pe.pos.numel()]);
        let img = random_image(&mut r);
        let mut tape = Tape::new();
        let x = tape.input(&img);
        let tok = pe.forward(&mut tape, x).unwrap();
        assert!(tape.values(tok.tokens).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn token_matches_manually_extracted_patch_projection() {
        let mut r = rng();
        let cfg = VitConfig::default();
        let pe = PatchEmbed::new(&cfg, &mut r);
        let img = random_image(&mut r);
        let mut tape = Tape::new();
        let x = tape.input(&img);
        let tok = pe.forward(&mut tape, x).unwrap();
        let got = tape.values(tok.tokens);

        // patch 5 of a 4x4 grid sits at (row 1, col 1): pixels 8..16 x 8..16
        let (p, d) = (cfg.patch, cfg.dim);
        let (py, px) = (1, 1);
        let mut flat = Vec::with_capacity(3 * p * p);
        for c in 0..3 {
            for dy in 0..p {
                for dx in 0..p {
                    flat.push(img.data()[c * 32 * 32 + (py * p + dy) * 32 + px * p + dx]);
                }
            }
        }
        let w = pe.proj.w.data_cloned();
        let pos = pe.pos.data_cloned();
        let idx = py * 4 + px;
        for j in 0..d {
            let expect: f64 =
                flat.iter().enumerate().map(|(i, v)| v * w[i * d + j]).sum::<f64>() + pos[idx * d + j];
            assert!((got[idx * d + j] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_in_every_block() {
        let mut r = rng();
        let vit = TinyViT::new(VitConfig::default(), &mut r).unwrap();
        let img = random_image(&mut r);
        let mut tape = Tape::new();
        let x = tape.input(&img);
        let (_, attns) = vit.forward_detail(&mut tape, x).unwrap();
        assert_eq!(attns.len(), 2);
        for attn in attns {
            let vals = tape.values(attn);
            let n = tape.shape(attn)[0];
            for row in vals.chunks(n) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "row sums to {s}");
            }
        }
    }

    #[test]
    fn zeroed_block_outputs_reduce_to_patch_embedding() {
        let mut r = rng();
        let vit = TinyViT::new(VitConfig::default(), &mut r).unwrap();
        for block in &vit.blocks {
            block.wo.set_data(&vec![0.0; block.wo.numel()]);
            block.mlp_out.w.set_data(&vec![0.0; block.mlp_out.w.numel()]);
            block.mlp_out.b.set_data(&vec![0.0; block.mlp_out.b.numel()]);
        }
        let img = random_image(&mut r);

        let mut tape = Tape::new();
        let x = tape.input(&img);
        let full = vit.forward(&mut tape, x).unwrap();
        let via_blocks = tape.values(full.tokens).to_vec();

        let mut tape = Tape::new();
        let x = tape.input(&img);
        let embed_only = vit.patch_embed.forward(&mut tape, x).unwrap();
        let direct = tape.values(embed_only.tokens);

        for (a, b) in via_blocks.iter().zip(direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn indivisible_patch_size_is_rejected() {
        let mut r = rng();
        let cfg = VitConfig { input_size: 30, ..VitConfig::default() };
        assert!(matches!(TinyViT::new(cfg, &mut r), Err(Error::Config(_))));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut r = rng();
        let vit = TinyViT::new(VitConfig::default(), &mut r).unwrap();
        let img = random_image(&mut r);
        let mut tape = Tape::new();
        let x = tape.input(&img);
        let tok = vit.forward(&mut tape, x).unwrap();
        let loss = tape.mean(tok.tokens).unwrap();
        tape.backward(loss).unwrap();
        super::super::assert_all_grads_nonzero(&vit);
    }
}
