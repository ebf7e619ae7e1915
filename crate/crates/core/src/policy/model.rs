use berrypick_nn::{
    ConvBlock, DecoderLayer, EncoderLayer, Graph, LayerNorm, Linear, Matrix, Mlp, ParamId, ParamStore, Real, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Fusion, PolicyConfig, PolicyError, Variant};
use crate::dataset::NormStats;
use crate::sim::Observation;

/// Mini-batch in model layout. Images are `[B*H*W, 3]` per configured
/// camera; chunk targets are `[B*k, .]`, sample-major.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub size: usize,
    pub images: Vec<Matrix<T>>,
    pub q: Matrix<T>,
    pub actions: Matrix<T>,
    pub poses: Matrix<T>,
    pub pad: Vec<bool>,
}

/// How the latent code `z` is produced.
#[derive(Clone, Debug)]
pub enum LatentMode<T> {
    /// `z = 0` (inference).
    Prior,
    /// `z = mu` from the CVAE encoder.
    Mean,
    /// `z = mu + exp(logvar / 2) * eps` with `eps` of shape `[B, d_z]`.
    Sample(Matrix<T>),
}

pub struct ForwardOut {
    pub actions: Var,
    pub poses: Option<Var>,
    pub hidden: Var,
    pub mu: Option<Var>,
    pub logvar: Option<Var>,
}

/// Observation in policy units: raw joint state and `[0, 1]` images in
/// configured camera order.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyInput {
    pub images: Vec<Vec<f32>>,
    pub q: [f64; 4],
}

impl PolicyInput {
    pub fn from_observation(obs: &Observation, cfg: &PolicyConfig) -> Result<Self, PolicyError> {
        let mut images = Vec::with_capacity(cfg.cameras.len());
        for cam in &cfg.cameras {
            let img = obs
                .images
                .get(cam)
                .ok_or_else(|| PolicyError::ShapeMismatch(format!("observation lacks camera {cam}")))?;
            if (img.width(), img.height()) != (cfg.image_width, cfg.image_height) {
                return Err(PolicyError::ShapeMismatch(format!(
                    "{cam} image is {}x{}, policy expects {}x{}",
                    img.width(),
                    img.height(),
                    cfg.image_width,
                    cfg.image_height
                )));
            }
            images.push(crate::dataset::image_to_f32(img.raw()));
        }
        Ok(PolicyInput { images, q: obs.q.to_array() })
    }
}

/// Denormalized chunk prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    pub actions: Vec<[f64; 5]>,
    /// Present for the end-pose variants.
    pub end_poses: Option<Vec<[f64; 6]>>,
    /// Decoder outputs, `k x width`.
    pub hidden: Vec<Vec<f64>>,
}

enum Heads {
    Act { action: Linear },
    EpactL { pose: Linear, fuse_in: Option<Linear>, fuse: Mlp },
    EpactEe { pose: Linear, ik: Mlp, grip: Linear },
}

struct Backbone {
    blocks: Vec<ConvBlock>,
    proj: Linear,
}

pub struct Policy<T: Real> {
    pub cfg: PolicyConfig,
    pub stats: NormStats,
    store: ParamStore<T>,
    backbones: Vec<Backbone>,
    enc_pos: ParamId,
    enc_q: Linear,
    enc_z: Linear,
    enc: Vec<EncoderLayer>,
    dec_query: ParamId,
    dec: Vec<DecoderLayer>,
    dec_ln: LayerNorm,
    cvae_cls: ParamId,
    cvae_q: Linear,
    cvae_a: Linear,
    cvae_pos: ParamId,
    cvae: Vec<EncoderLayer>,
    cvae_out: Linear,
    heads: Heads,
}

/// Parameter-name prefixes of the head parameters that feed the gripper
/// channel without passing through the shared transformer.
pub fn gripper_branch_prefixes(variant: Variant) -> &'static [&'static str] {
    match variant {
        Variant::Act => &["head.action."],
        Variant::EpactL => &["head.pose.", "head.fuse"],
        Variant::EpactEe => &["head.grip."],
    }
}

impl<T: Real> Policy<T> {
    pub fn new(cfg: PolicyConfig, stats: NormStats) -> Result<Self, PolicyError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut s = ParamStore::new();
        let d = cfg.width;
        let mut backbones = Vec::new();
        for cam in &cfg.cameras {
            let mut blocks = Vec::new();
            let mut c_in = 3;
            for (i, &c) in cfg.backbone.iter().enumerate() {
                blocks.push(ConvBlock::new(&mut s, &format!("bb.{cam}.{i}"), c_in, c, 3, 2, 1, &mut rng));
                c_in = c;
            }
            let proj = Linear::new(&mut s, &format!("bb.{cam}.proj"), c_in, d, &mut rng);
            backbones.push(Backbone { blocks, proj });
        }
        let n_tok = 2 + cfg.cameras.len() * cfg.tokens_per_camera();
        let enc_pos = s.add_normal("enc.pos", n_tok, d, 0.02, &mut rng);
        let enc_q = Linear::new(&mut s, "enc.q", 4, d, &mut rng);
        let enc_z = Linear::new(&mut s, "enc.z", cfg.latent_dim, d, &mut rng);
        let enc = (0..cfg.enc_layers)
            .map(|i| EncoderLayer::new(&mut s, &format!("enc.{i}"), d, cfg.heads, cfg.ff_dim, &mut rng))
            .collect();
        let dec_query = s.add_normal("dec.query", cfg.chunk, d, 0.02, &mut rng);
        let dec = (0..cfg.dec_layers)
            .map(|i| DecoderLayer::new(&mut s, &format!("dec.{i}"), d, cfg.heads, cfg.ff_dim, &mut rng))
            .collect();
        let dec_ln = LayerNorm::new(&mut s, "dec.ln", d);
        let cvae_cls = s.add_normal("cvae.cls", 1, d, 0.02, &mut rng);
        let cvae_q = Linear::new(&mut s, "cvae.q", 4, d, &mut rng);
        let cvae_a = Linear::new(&mut s, "cvae.a", 5, d, &mut rng);
        let cvae_pos = s.add_normal("cvae.pos", cfg.chunk + 2, d, 0.02, &mut rng);
        let cvae = (0..cfg.cvae_layers)
            .map(|i| EncoderLayer::new(&mut s, &format!("cvae.{i}"), d, cfg.heads, cfg.ff_dim, &mut rng))
            .collect();
        let cvae_out = Linear::new(&mut s, "cvae.out", d, 2 * cfg.latent_dim, &mut rng);
        let heads = match cfg.variant {
            Variant::Act => Heads::Act { action: Linear::new(&mut s, "head.action", d, 5, &mut rng) },
            Variant::EpactL => {
                let pose = Linear::new(&mut s, "head.pose", d, 6, &mut rng);
                match cfg.fusion {
                    Fusion::Concat => Heads::EpactL {
                        pose,
                        fuse_in: None,
                        fuse: Mlp::new(&mut s, "head.fuse", &[6 + d, cfg.head_hidden, 5], &mut rng),
                    },
                    Fusion::Add => Heads::EpactL {
                        pose,
                        fuse_in: Some(Linear::new(&mut s, "head.fuse_in", 6, d, &mut rng)),
                        fuse: Mlp::new(&mut s, "head.fuse", &[d, cfg.head_hidden, 5], &mut rng),
                    },
                }
            }
            Variant::EpactEe => Heads::EpactEe {
                pose: Linear::new(&mut s, "head.pose", d, 6, &mut rng),
                ik: Mlp::new(&mut s, "head.ik", &[6, cfg.ik_hidden, cfg.ik_hidden, 4], &mut rng),
                grip: Linear::new(&mut s, "head.grip", d, 1, &mut rng),
            },
        };
        Ok(Policy {
            cfg,
            stats,
            store: s,
            backbones,
            enc_pos,
            enc_q,
            enc_z,
            enc,
            dec_query,
            dec,
            dec_ln,
            cvae_cls,
            cvae_q,
            cvae_a,
            cvae_pos,
            cvae,
            cvae_out,
            heads,
        })
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    fn check_batch(&self, b: &Batch<T>) -> Result<(), PolicyError> {
        let c = &self.cfg;
        let px = c.image_width * c.image_height;
        let bad = |m: String| Err(PolicyError::ShapeMismatch(m));
        if b.images.len() != c.cameras.len() {
            return bad(format!("{} image streams for {} cameras", b.images.len(), c.cameras.len()));
        }
        for img in &b.images {
            if img.shape() != (b.size * px, 3) {
                return bad(format!("image matrix {:?}, expected {:?}", img.shape(), (b.size * px, 3)));
            }
        }
        if b.q.shape() != (b.size, 4) {
            return bad(format!("q matrix {:?}", b.q.shape()));
        }
        let rows = b.size * c.chunk;
        if b.actions.shape() != (rows, 5) || b.poses.shape() != (rows, 6) || b.pad.len() != rows {
            return bad(format!(
                "targets {:?}/{:?}/{} for {rows} rows",
                b.actions.shape(),
                b.poses.shape(),
                b.pad.len()
            ));
        }
        Ok(())
    }

    /// CVAE encoder over `[CLS, q, a_1..a_k]`; padded actions are masked out.
    pub fn encode_cvae(&self, g: &mut Graph<'_, T>, b: &Batch<T>) -> (Var, Var) {
        let (bs, k, dz) = (b.size, self.cfg.chunk, self.cfg.latent_dim);
        let cls = g.param(self.cvae_cls);
        let cls = g.tile(cls, bs);
        let qc = g.constant(b.q.clone());
        let qv = self.cvae_q.forward(g, qc);
        let ac = g.constant(b.actions.clone());
        let av = self.cvae_a.forward(g, ac);
        let seq = g.concat_seq(&[(cls, 1), (qv, 1), (av, k)], bs);
        let pos = g.param(self.cvae_pos);
        let mut x = g.add_pos(seq, pos);
        let mut mask = Vec::with_capacity(bs * (k + 2));
        for s in 0..bs {
            mask.extend([false, false]);
            mask.extend_from_slice(&b.pad[s * k..(s + 1) * k]);
        }
        for layer in &self.cvae {
            x = layer.forward(g, x, bs, k + 2, Some(mask.clone()));
        }
        let cls_out = g.slice_seq(x, k + 2, 0, 1);
        let stats = self.cvae_out.forward(g, cls_out);
        (g.slice_cols(stats, 0, dz), g.slice_cols(stats, dz, dz))
    }

    pub fn forward(&self, g: &mut Graph<'_, T>, b: &Batch<T>, mode: &LatentMode<T>) -> Result<ForwardOut, PolicyError> {
        self.check_batch(b)?;
        let (bs, dz) = (b.size, self.cfg.latent_dim);
        let (z, mu, logvar) = match mode {
            LatentMode::Prior => (g.constant(Matrix::zeros(bs, dz)), None, None),
            LatentMode::Mean => {
                let (mu, lv) = self.encode_cvae(g, b);
                (mu, Some(mu), Some(lv))
            }
            LatentMode::Sample(eps) => {
                if eps.shape() != (bs, dz) {
                    return Err(PolicyError::ShapeMismatch(format!("eps {:?}", eps.shape())));
                }
                let (mu, lv) = self.encode_cvae(g, b);
                let half = g.scale(lv, T::lit(0.5));
                let std = g.exp(half);
                let noise = g.mul_const(std, eps.clone());
                (g.add(mu, noise), Some(mu), Some(lv))
            }
        };
        let hidden = self.trunk(g, b, z);
        let (actions, poses) = self.apply_heads(g, hidden, hidden);
        Ok(ForwardOut { actions, poses, hidden, mu, logvar })
    }

    /// Observation encoder plus chunk decoder; returns `[B*k, width]`.
    fn trunk(&self, g: &mut Graph<'_, T>, b: &Batch<T>, z: Var) -> Var {
        let (bs, k) = (b.size, self.cfg.chunk);
        let mut parts = Vec::new();
        let zt = self.enc_z.forward(g, z);
        parts.push((zt, 1));
        let qc = g.constant(b.q.clone());
        let qt = self.enc_q.forward(g, qc);
        parts.push((qt, 1));
        for (bb, img) in self.backbones.iter().zip(&b.images) {
            let mut x = g.constant(img.clone());
            let (mut h, mut w) = (self.cfg.image_height, self.cfg.image_width);
            for block in &bb.blocks {
                let (y, ho, wo) = block.forward(g, x, bs, h, w);
                x = y;
                h = ho;
                w = wo;
            }
            let tok = bb.proj.forward(g, x);
            parts.push((tok, h * w));
        }
        let len: usize = parts.iter().map(|p| p.1).sum();
        let seq = g.concat_seq(&parts, bs);
        let pos = g.param(self.enc_pos);
        let mut mem = g.add_pos(seq, pos);
        for layer in &self.enc {
            mem = layer.forward(g, mem, bs, len, None);
        }
        let query = g.param(self.dec_query);
        let mut x = g.tile(query, bs);
        for layer in &self.dec {
            x = layer.forward(g, x, mem, bs, k, len);
        }
        self.dec_ln.forward(g, x)
    }

    /// Variant heads. `h_grip` feeds only the separate gripper branch of
    /// EPACT-EE; the other variants use `h_pose` throughout.
    pub fn apply_heads(&self, g: &mut Graph<'_, T>, h_pose: Var, h_grip: Var) -> (Var, Option<Var>) {
        match &self.heads {
            Heads::Act { action } => (action.forward(g, h_pose), None),
            Heads::EpactL { pose, fuse_in, fuse } => {
                let e = pose.forward(g, h_pose);
                let e_in = if self.cfg.stop_grad { g.detach(e) } else { e };
                let fused = match fuse_in {
                    None => g.concat_cols(&[e_in, h_pose]),
                    Some(lin) => {
                        let p = lin.forward(g, e_in);
                        g.add(p, h_pose)
                    }
                };
                (fuse.forward(g, fused), Some(e))
            }
            Heads::EpactEe { pose, ik, grip } => {
                let e = pose.forward(g, h_pose);
                let joints = ik.forward(g, e);
                let gr = grip.forward(g, h_grip);
                (g.concat_cols(&[joints, gr]), Some(e))
            }
        }
    }

    /// Loss terms `(rec_action, reg, rec_end_pose, total)` as graph nodes.
    /// Without a posterior the KL term is a constant zero.
    pub fn loss(&self, g: &mut Graph<'_, T>, b: &Batch<T>, out: &ForwardOut) -> (Var, Var, Var, Var) {
        let weights: Vec<T> = b.pad.iter().map(|&p| if p { T::zero() } else { T::one() }).collect();
        let rec = g.masked_l1(out.actions, b.actions.clone(), weights.clone());
        let reg = match (out.mu, out.logvar) {
            (Some(mu), Some(lv)) => g.kl_std_normal(mu, lv),
            _ => g.constant(Matrix::scalar(T::zero())),
        };
        let ep = match out.poses {
            Some(p) => g.masked_l1(p, b.poses.clone(), weights),
            None => g.constant(Matrix::scalar(T::zero())),
        };
        let breg = g.scale(reg, T::lit(self.cfg.beta));
        let gep = g.scale(ep, T::lit(self.cfg.gamma));
        let partial = g.add(rec, breg);
        let total = g.add(partial, gep);
        (rec, reg, ep, total)
    }

    /// Inference batch of size one from a single observation.
    pub fn input_batch(&self, input: &PolicyInput) -> Result<Batch<T>, PolicyError> {
        let c = &self.cfg;
        let px = c.image_width * c.image_height * 3;
        if input.images.len() != c.cameras.len() || input.images.iter().any(|i| i.len() != px) {
            return Err(PolicyError::ShapeMismatch("input images do not match the policy cameras".into()));
        }
        let images = input
            .images
            .iter()
            .map(|img| Matrix::from_vec(px / 3, 3, img.iter().map(|&v| T::lit(v as f64 - 0.5)).collect()))
            .collect();
        let q = self.stats.norm_q(input.q);
        Ok(Batch {
            size: 1,
            images,
            q: Matrix::from_vec(1, 4, q.iter().map(|&v| T::lit(v)).collect()),
            actions: Matrix::zeros(c.chunk, 5),
            poses: Matrix::zeros(c.chunk, 6),
            pad: vec![false; c.chunk],
        })
    }

    /// Chunk prediction with `z = 0`, denormalized.
    pub fn predict(&self, input: &PolicyInput) -> Result<PredictionBundle, PolicyError> {
        let batch = self.input_batch(input)?;
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, &batch, &LatentMode::Prior)?;
        let to_f64 = |m: &Matrix<T>| -> Vec<Vec<f64>> {
            (0..m.rows()).map(|r| m.row(r).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()).collect()
        };
        let actions = to_f64(g.value(out.actions))
            .into_iter()
            .map(|r| self.stats.denorm_action(std::array::from_fn(|i| r[i])))
            .collect();
        let end_poses = out.poses.map(|p| {
            to_f64(g.value(p)).into_iter().map(|r| self.stats.denorm_pose(std::array::from_fn(|i| r[i]))).collect()
        });
        Ok(PredictionBundle { actions, end_poses, hidden: to_f64(g.value(out.hidden)) })
    }
}
