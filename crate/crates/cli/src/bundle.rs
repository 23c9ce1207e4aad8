//! Trained components and their mapping to model files.

use spen_core::autodiff::{ParamStore, Tensor};
use spen_core::data::TagSet;
use spen_core::energy::{ChainEnergy, JointEnergy, MlcEnergy, TlmEnergy};
use spen_core::inference::{InferenceNetwork, Role};
use spen_core::nn::{EmbeddingTable, TagLm};
use spen_core::rng_from_seed;
use spen_core::train::SequenceEnergy;

use crate::error::{CliError, CliResult};
use crate::model::{restore_into, ModelFile};

/// A network with its parameters and the hidden size it was built with.
#[derive(Clone, Debug)]
pub struct NetPart {
    pub net: InferenceNetwork,
    pub store: ParamStore,
    pub hidden: usize,
}

impl NetPart {
    pub fn seq(role: Role, input_dim: usize, hidden: usize, num_labels: usize, seed: u64) -> CliResult<Self> {
        let mut store = ParamStore::new();
        let net = InferenceNetwork::seq(&mut store, role, input_dim, hidden, num_labels, &mut rng_from_seed(seed))?;
        Ok(Self { net, store, hidden })
    }

    pub fn mlc(role: Role, widths: &[usize], seed: u64) -> CliResult<Self> {
        let mut store = ParamStore::new();
        let net = InferenceNetwork::mlc(&mut store, role, widths, &mut rng_from_seed(seed))?;
        Ok(Self { net, store, hidden: 0 })
    }

    pub fn with_role(&self, role: Role) -> Self {
        Self {
            net: self.net.with_role(role),
            store: self.store.clone(),
            hidden: self.hidden,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EnergyPart {
    pub chain: ChainEnergy,
    pub store: ParamStore,
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub struct LmPart {
    pub lm: TagLm,
    pub store: ParamStore,
}

/// Components of a sequence-labeling model; any may be absent.
#[derive(Clone, Debug)]
pub struct SeqModel {
    pub tags: TagSet,
    pub emb: Option<EmbeddingTable>,
    pub energy: Option<EnergyPart>,
    pub lm: Option<LmPart>,
    pub tlm_weight: f64,
    pub phi: Option<NetPart>,
    pub psi: Option<NetPart>,
    pub tagger: Option<NetPart>,
    pub seed: u64,
}

fn missing(what: &str) -> CliError {
    CliError::Model(format!("model has no {what}"))
}

fn restored(file: &ModelFile, group: &str, mut target: ParamStore) -> CliResult<ParamStore> {
    let stored = file.group(group).ok_or_else(|| missing(&format!("{group} parameters")))?;
    restore_into(&mut target, stored, group)?;
    Ok(target)
}

const SEQ_NETS: [(&str, Role); 3] = [("phi", Role::CostAugmented), ("psi", Role::TestTime), ("tagger", Role::TestTime)];

impl SeqModel {
    pub fn new(tags: TagSet, emb: Option<EmbeddingTable>, seed: u64) -> Self {
        Self {
            tags,
            emb,
            energy: None,
            lm: None,
            tlm_weight: 0.0,
            phi: None,
            psi: None,
            tagger: None,
            seed,
        }
    }

    pub fn num_labels(&self) -> usize {
        self.tags.len()
    }

    pub fn emb(&self) -> CliResult<&EmbeddingTable> {
        self.emb.as_ref().ok_or_else(|| missing("embeddings"))
    }

    pub fn energy(&self) -> CliResult<&EnergyPart> {
        self.energy.as_ref().ok_or_else(|| missing("energy"))
    }

    /// The sequence energy, joint with the tag LM when one is attached.
    pub fn sequence_energy(&self) -> CliResult<SequenceEnergy> {
        let e = self.energy()?;
        Ok(match &self.lm {
            Some(lm) => SequenceEnergy::Joint {
                energy: JointEnergy {
                    chain: e.chain.clone(),
                    tlm: TlmEnergy::new(lm.lm.clone()),
                    weight: self.tlm_weight,
                },
                lm: lm.store.clone(),
            },
            None => SequenceEnergy::Chain(e.chain.clone()),
        })
    }

    /// The network used for test-time decoding: Ψ, else Φ, else the tagger.
    pub fn decoder_net(&self) -> Option<(&'static str, &NetPart)> {
        [("psi", &self.psi), ("phi", &self.phi), ("tagger", &self.tagger)]
            .into_iter()
            .find_map(|(n, p)| p.as_ref().map(|p| (n, p)))
    }

    pub fn to_file(&self) -> ModelFile {
        let mut f = ModelFile::new();
        f.set("format_version", crate::model::FORMAT_VERSION);
        f.set("task", "seq");
        f.set("seed", self.seed);
        f.set("tags", self.tags.names().join("\t"));
        let mut arch = Vec::new();
        if let Some(emb) = &self.emb {
            f.set("vocab", emb.tokens().join("\t"));
            f.set("embedding_dim", emb.dim());
            let mut s = ParamStore::new();
            s.add("matrix", emb.matrix().clone());
            f.groups.insert("emb".into(), s);
        }
        if let Some(e) = &self.energy {
            f.set("energy.hidden", e.hidden);
            f.groups.insert("theta".into(), e.store.clone());
            arch.push(format!("chain energy (BLSTM {})", e.hidden));
        }
        if let Some(lm) = &self.lm {
            f.set("lm.hidden", lm.lm.hidden_dim());
            f.set("lm.layers", lm.lm.num_layers());
            f.set("tlm_weight", self.tlm_weight);
            f.groups.insert("lm".into(), lm.store.clone());
            arch.push(format!("tag LM ({}x{}) weight {}", lm.lm.num_layers(), lm.lm.hidden_dim(), self.tlm_weight));
        }
        for (name, part) in [("phi", &self.phi), ("psi", &self.psi), ("tagger", &self.tagger)] {
            if let Some(p) = part {
                f.set(&format!("{name}.hidden"), p.hidden);
                f.groups.insert(name.into(), p.store.clone());
                arch.push(format!("{name} (BLSTM {})", p.hidden));
            }
        }
        f.set("architecture", if arch.is_empty() { "none".to_string() } else { arch.join(", ") });
        f
    }

    pub fn from_file(f: &ModelFile) -> CliResult<Self> {
        if f.get("task")? != "seq" {
            return Err(CliError::Model(format!("expected a sequence model, found task {}", f.get("task")?)));
        }
        let tags = TagSet::new(f.get("tags")?.split('\t').map(str::to_string).collect())?;
        let l = tags.len();
        let seed = f.parse("seed")?;
        let emb = match f.group("emb") {
            Some(g) => {
                let vocab: Vec<String> = f.get("vocab")?.split('\t').map(str::to_string).collect();
                let matrix = g
                    .find("matrix")
                    .map(|id| g.get(id).clone())
                    .ok_or_else(|| missing("embedding matrix"))?;
                Some(EmbeddingTable::from_matrix(vocab, matrix)?)
            }
            None => None,
        };
        let mut m = Self::new(tags, emb, seed);
        let input_dim = m.emb.as_ref().map(EmbeddingTable::dim);
        if f.group("theta").is_some() {
            let hidden = f.parse("energy.hidden")?;
            let mut store = ParamStore::new();
            let d = input_dim.ok_or_else(|| missing("embeddings for its energy"))?;
            let chain = ChainEnergy::new(&mut store, d, hidden, l, &mut rng_from_seed(0))?;
            m.energy = Some(EnergyPart {
                chain,
                store: restored(f, "theta", store)?,
                hidden,
            });
        }
        if f.group("lm").is_some() {
            let mut store = ParamStore::new();
            let lm = TagLm::new(&mut store, "lm", l, f.parse("lm.hidden")?, f.parse("lm.layers")?, &mut rng_from_seed(0))?;
            m.lm = Some(LmPart {
                lm,
                store: restored(f, "lm", store)?,
            });
            m.tlm_weight = f.parse("tlm_weight")?;
        }
        for (name, role) in SEQ_NETS {
            if f.group(name).is_none() {
                continue;
            }
            let d = input_dim.ok_or_else(|| missing(&format!("embeddings for {name}")))?;
            let mut part = NetPart::seq(role, d, f.parse(&format!("{name}.hidden"))?, l, 0)?;
            part.store = restored(f, name, part.store)?;
            match name {
                "phi" => m.phi = Some(part),
                "psi" => m.psi = Some(part),
                _ => m.tagger = Some(part),
            }
        }
        Ok(m)
    }
}

/// Components of a multi-label model.
#[derive(Clone, Debug)]
pub struct MlcModel {
    pub widths: Vec<usize>,
    /// Pretrained feature network: `F(x)`, `Φ₀` and the local baseline.
    pub feature: NetPart,
    pub feature_tau: f64,
    pub energy: Option<(MlcEnergy, ParamStore)>,
    pub phi: Option<NetPart>,
    pub psi: Option<NetPart>,
    /// Decision threshold of the SPEN inference network.
    pub tau: Option<f64>,
    pub seed: u64,
}

fn join(ws: &[usize]) -> String {
    ws.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl MlcModel {
    pub fn num_labels(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// The network used for test-time decoding with its threshold.
    pub fn decoder_net(&self) -> Option<(&'static str, &NetPart, f64)> {
        let tau = self.tau?;
        [("psi", &self.psi), ("phi", &self.phi)]
            .into_iter()
            .find_map(|(n, p)| p.as_ref().map(|p| (n, p, tau)))
    }

    pub fn to_file(&self) -> ModelFile {
        let mut f = ModelFile::new();
        f.set("format_version", crate::model::FORMAT_VERSION);
        f.set("task", "mlc");
        f.set("seed", self.seed);
        f.set("widths", join(&self.widths));
        f.set("num_labels", self.num_labels());
        f.set("num_features", self.widths[0]);
        f.set("feature.tau", self.feature_tau);
        f.groups.insert("feature".into(), self.feature.store.clone());
        let mut arch = vec![format!("MLP {}", join(&self.widths))];
        if let Some((e, store)) = &self.energy {
            f.set("energy.interactions", e.interaction_dim());
            f.groups.insert("theta".into(), store.clone());
            arch.push(format!("MLC energy ({} interaction terms)", e.interaction_dim()));
        }
        for (name, part) in [("phi", &self.phi), ("psi", &self.psi)] {
            if let Some(p) = part {
                f.groups.insert(name.into(), p.store.clone());
                arch.push(name.to_string());
            }
        }
        if let Some(t) = self.tau {
            f.set("tau", t);
        }
        f.set("architecture", arch.join(", "));
        f
    }

    pub fn from_file(f: &ModelFile) -> CliResult<Self> {
        if f.get("task")? != "mlc" {
            return Err(CliError::Model(format!("expected a multi-label model, found task {}", f.get("task")?)));
        }
        let widths = f
            .get("widths")?
            .split(',')
            .map(|w| w.parse::<usize>().map_err(|_| CliError::Model(format!("bad widths entry {w:?}"))))
            .collect::<CliResult<Vec<_>>>()?;
        if widths.len() < 3 {
            return Err(CliError::Model("multi-label widths need a hidden layer".into()));
        }
        let mut feature = NetPart::mlc(Role::Anchor, &widths, 0)?;
        feature.store = restored(f, "feature", feature.store)?;
        let energy = match f.group("theta") {
            Some(_) => {
                let mut store = ParamStore::new();
                let feat_dim = widths[widths.len() - 2];
                let e = MlcEnergy::new(&mut store, *widths.last().unwrap(), feat_dim, f.parse("energy.interactions")?, &mut rng_from_seed(0))?;
                Some((e, restored(f, "theta", store)?))
            }
            None => None,
        };
        let mut nets = [("phi", Role::CostAugmented, None), ("psi", Role::TestTime, None)];
        for (name, role, slot) in nets.iter_mut() {
            if f.group(name).is_some() {
                let mut p = NetPart::mlc(*role, &widths, 0)?;
                p.store = restored(f, name, p.store)?;
                *slot = Some(p);
            }
        }
        let [(_, _, phi), (_, _, psi)] = nets;
        Ok(Self {
            feature_tau: f.parse("feature.tau")?,
            tau: if f.manifest.contains_key("tau") { Some(f.parse("tau")?) } else { None },
            seed: f.parse("seed")?,
            widths,
            feature,
            energy,
            phi,
            psi,
        })
    }
}

/// Reads the task recorded in a model file.
pub fn task_of(f: &ModelFile) -> CliResult<&str> {
    f.get("task")
}

/// Tensor copy helper for tests and callers that need a detached matrix.
pub fn transitions(model: &SeqModel) -> CliResult<Tensor> {
    let e = model.energy()?;
    Ok(e.store.get(e.chain.transitions()).clone())
}
