//! The full model: unimodal extraction, predictive self-attention and
//! hierarchical cross-modal attention, decoupled encoders, graph fusion and
//! the prediction head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, Variant};
use crate::data::{Batch, DatasetInfo, Modality};
use crate::decouple::{
    adversarial_losses, disparity_loss, pool, separation_loss, Encoder, ImportanceDiscriminator,
    ModalityDiscriminator, Pooling,
};
use crate::error::Result;
use crate::fusion::{task_loss, total_loss, Fusion, Head, LossTerms};
use crate::hca::{HcaOptions, HcaStack};
use crate::params::{ParamBuilder, ParamStore};
use crate::psa::{PsaOptions, PsaStack};
use crate::tensor::{Graph, Tensor, Var};
use crate::unimodal::UnimodalExtractor;

#[derive(Clone, Debug)]
pub struct Mea {
    pub info: DatasetInfo,
    pub variant: Variant,
    pub extractors: [UnimodalExtractor; 3],
    pub psa: Option<PsaStack>,
    pub hca: Option<HcaStack>,
    pub exclusive: [Encoder; 3],
    pub agnostic: Encoder,
    pub importance: ImportanceDiscriminator,
    pub discriminator: ModalityDiscriminator,
    pub fuse_exclusive: Fusion,
    pub fuse_agnostic: Fusion,
    pub head: Head,
    pub psa_opts: PsaOptions,
    pub hca_opts: HcaOptions,
    pub pooling: Pooling,
    pub use_exclusive: bool,
    pub use_agnostic: bool,
    pub self_loops: bool,
    pub alpha: f64,
    pub beta: f64,
    pub grl_lambda: f64,
    pub sep_loss: bool,
    pub no_omega: bool,
}

/// Everything a forward pass exposes.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[n, 1]` scores or `[n, C]` logits.
    pub pred: Var,
    pub he: [Var; 3],
    pub ha: [Var; 3],
    pub psa_weights: Vec<[Var; 3]>,
    pub psi: Vec<Var>,
    pub hca_fine_weights: [Vec<Var>; 3],
    pub xi: [Option<Var>; 2],
}

/// Per-batch loss terms plus the discriminator's auxiliary objective.
#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub terms: LossTerms,
    pub importance: Var,
    /// What gets differentiated: `L_all` plus the auxiliary term.
    pub objective: Var,
}

impl Mea {
    /// Registers every parameter in `store` and returns the model.
    pub fn new(config: &RunConfig, info: &DatasetInfo, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut pb = ParamBuilder::new(store, &mut rng);
        let mc = &config.model;
        let ab = &config.ablation;
        let (d, d_h) = (mc.d, mc.d_h);

        let mut extractors = Vec::with_capacity(3);
        for m in Modality::ALL {
            extractors.push(UnimodalExtractor::new(
                &mut pb.sub(&format!("unimodal.{}", m.name())),
                info.dims[m.index()],
                d,
                mc.kernels[m.index()],
            )?);
        }
        let late = mc.variant == Variant::LateFusion;
        let psa = if late || ab.disable_psa {
            None
        } else {
            Some(PsaStack::new(
                &mut pb.sub("psa"),
                config.psa.layers,
                d,
                mc.heads,
                info.max_lengths,
                config.psa.wal_hidden,
            )?)
        };
        let hca = if late || ab.disable_hca {
            None
        } else {
            Some(HcaStack::new(&mut pb.sub("hca"), config.hca.layers, d, mc.heads)?)
        };
        let mut exclusive = Vec::with_capacity(3);
        for m in Modality::ALL {
            exclusive.push(Encoder::new(&mut pb.sub("exclusive"), m.name(), d, d_h)?);
        }
        let agnostic = Encoder::new(&mut pb, "agnostic", d, d_h)?;
        let importance = ImportanceDiscriminator::new(&mut pb.sub("d_i"), d_h)?;
        let discriminator = ModalityDiscriminator::new(&mut pb.sub("d_m"), d_h)?;
        let kind = config.fusion_kind();
        let fuse_exclusive = Fusion::new(&mut pb.sub("dgf_exclusive"), kind, d_h)?;
        let fuse_agnostic = Fusion::new(&mut pb.sub("dgf_agnostic"), kind, d_h)?;
        let use_exclusive = !ab.use_only_agnostic;
        let use_agnostic = !ab.use_only_exclusive;
        let head_in = if late {
            3 * d
        } else {
            kind.width(d_h) * (use_exclusive as usize + use_agnostic as usize)
        };
        let head = Head::new(
            &mut pb.sub("head"),
            head_in,
            config.head_hidden(),
            info.mode.output_dim(),
            config.head.layers,
        )?;
        Ok(Self {
            info: *info,
            variant: mc.variant,
            extractors: extractors.try_into().expect("three modalities"),
            psa,
            hca,
            exclusive: exclusive.try_into().expect("three modalities"),
            agnostic,
            importance,
            discriminator,
            fuse_exclusive,
            fuse_agnostic,
            head,
            psa_opts: PsaOptions {
                mu: config.psa.mu,
                literal: config.psa.literal_eq2,
                chain: !ab.disable_prediction_chain,
                wal: !ab.disable_wal,
            },
            hca_opts: HcaOptions {
                mixed: !ab.disable_mru_mixed,
                coarse: !ab.disable_mru_coarse,
                fine: !ab.disable_mru_fine,
            },
            pooling: mc.pooling,
            use_exclusive,
            use_agnostic,
            self_loops: config.dgf.self_loops,
            alpha: config.loss.alpha,
            beta: config.loss.beta,
            grl_lambda: config.loss.grl_lambda,
            sep_loss: ab.use_sep_loss,
            no_omega: ab.no_omega,
        })
    }

    /// Unimodal representations `Z_m`, `[n, t̂_m, d]`.
    pub fn extract(&self, g: &mut Graph<'_>, batch: &Batch) -> Result<[Var; 3]> {
        let mut z = Vec::with_capacity(3);
        for m in Modality::ALL {
            let x = g.constant(batch.features(m).clone());
            z.push(self.extractors[m.index()].forward(g, x, batch.mask(m))?);
        }
        Ok(z.try_into().expect("three modalities"))
    }

    pub fn forward(&self, g: &mut Graph<'_>, batch: &Batch) -> Result<Forward> {
        let z = self.extract(g, batch)?;
        let masks = &batch.masks;
        if self.variant == Variant::LateFusion {
            let pooled: Vec<Var> = (0..3)
                .map(|m| pool(g, z[m], &masks[m], self.pooling))
                .collect::<Result<_>>()?;
            let h = g.concat(&pooled, 1)?;
            let pred = self.head.forward(g, h)?;
            let [a, b, c] = [pooled[0], pooled[1], pooled[2]];
            return Ok(Forward {
                pred,
                he: [a, b, c],
                ha: [a, b, c],
                psa_weights: Vec::new(),
                psi: Vec::new(),
                hca_fine_weights: Default::default(),
                xi: [None, None],
            });
        }

        let (z_e, psa_weights, psi) = match &self.psa {
            Some(psa) => {
                let out = psa.forward(g, z, masks, &self.psa_opts)?;
                (out.z, out.weights, out.psi)
            }
            None => (z, Vec::new(), Vec::new()),
        };
        let (z_a, hca_fine_weights) = match &self.hca {
            Some(hca) => {
                let out = hca.forward(g, z, masks, &self.hca_opts)?;
                (out.z, out.fine_weights)
            }
            None => (z, Default::default()),
        };

        let mut he = z_e;
        let mut ha = z_a;
        for m in 0..3 {
            he[m] = self.exclusive[m].forward(g, z_e[m], &masks[m], self.pooling)?;
            ha[m] = self.agnostic.forward(g, z_a[m], &masks[m], self.pooling)?;
        }

        let mut parts = Vec::with_capacity(2);
        let mut xi = [None, None];
        if self.use_exclusive {
            let f = self.fuse_exclusive.forward(g, &he, self.self_loops)?;
            xi[0] = f.xi;
            parts.push(f.h);
        }
        if self.use_agnostic {
            let f = self.fuse_agnostic.forward(g, &ha, self.self_loops)?;
            xi[1] = f.xi;
            parts.push(f.h);
        }
        let h = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 1)? };
        let pred = self.head.forward(g, h)?;
        Ok(Forward {
            pred,
            he,
            ha,
            psa_weights,
            psi,
            hca_fine_weights,
            xi,
        })
    }

    pub fn losses(&self, g: &mut Graph<'_>, fwd: &Forward, batch: &Batch) -> Result<Losses> {
        let targets: Vec<f64> = batch.labels.iter().map(|l| l.as_f64()).collect();
        let task = task_loss(g, fwd.pred, self.info.mode, &targets)?;
        let zero = g.constant(Tensor::scalar(0.0));
        if self.variant == Variant::LateFusion || batch.len() < 2 {
            let terms = total_loss(g, task, zero, zero, zero, self.alpha, self.beta)?;
            return Ok(Losses {
                terms,
                importance: zero,
                objective: terms.all,
            });
        }
        let dis = if self.sep_loss {
            separation_loss(g, &fwd.he, &fwd.ha)?
        } else {
            disparity_loss(g, &fwd.he, &fwd.ha)?
        };
        let mut omega = Vec::with_capacity(3);
        for m in 0..3 {
            if self.no_omega {
                omega.push(Tensor::ones(&[batch.len(), 1]));
            } else {
                let h = g.detach(fwd.ha[m]);
                omega.push(self.importance.importance(g, h, m)?.1);
            }
        }
        let omega: [Tensor; 3] = omega.try_into().expect("three modalities");
        let (agn, exc) = adversarial_losses(g, &self.discriminator, &fwd.he, &fwd.ha, &omega, self.grl_lambda)?;
        let terms = total_loss(g, task, dis, agn, exc, self.alpha, self.beta)?;
        let importance = if self.no_omega {
            zero
        } else {
            self.importance.training_loss(g, &fwd.ha)?
        };
        let objective = g.add(terms.all, importance)?;
        Ok(Losses {
            terms,
            importance,
            objective,
        })
    }
}
