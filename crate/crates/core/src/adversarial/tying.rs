use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::model::{Domain, Layer, Module, ModelConfig, QaModel};

/// Where the discriminator reads its input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanAttach {
    #[default]
    None,
    /// Question and document outputs of the embedding encoder.
    EmbeddingEncoder,
    /// Fused document output of context-query attention.
    AttentionOutput,
}

/// Which layers the source and target models share. The input embedding
/// (word and character tables included) is always shared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TyingConfig {
    pub tie_l1: bool,
    pub tie_l2: bool,
    pub tie_l3: bool,
    pub tie_l4: bool,
    pub gan_attach: GanAttach,
}

impl Default for TyingConfig {
    fn default() -> Self {
        TyingConfig {
            tie_l1: true,
            tie_l2: true,
            tie_l3: true,
            tie_l4: true,
            gan_attach: GanAttach::EmbeddingEncoder,
        }
    }
}

impl TyingConfig {
    pub fn all_tied(gan_attach: GanAttach) -> Self {
        TyingConfig { gan_attach, ..Self::default() }
    }

    /// The eight tie patterns of the layer-tying study, all-tied first.
    pub fn studied(gan_attach: GanAttach) -> Vec<Self> {
        STUDIED_TYINGS
            .iter()
            .map(|bits| TyingConfig { gan_attach, ..bits.parse().expect("valid literal") })
            .collect()
    }

    pub fn is_tied(&self, layer: Layer) -> bool {
        match layer {
            Layer::L1 => self.tie_l1,
            Layer::L2 => self.tie_l2,
            Layer::L3 => self.tie_l3,
            Layer::L4 => self.tie_l4,
        }
    }

    /// Layers whose parameters receive the adversarial gradient.
    pub fn adversarial_layers(&self) -> &'static [Layer] {
        match self.gan_attach {
            GanAttach::None => &[],
            GanAttach::EmbeddingEncoder => &[Layer::L1],
            GanAttach::AttentionOutput => &[Layer::L1, Layer::L2],
        }
    }
}

/// Formats as tie bits plus an attach suffix, e.g. `1111+embGAN`.
impl fmt::Display for TyingConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in Layer::ALL {
            f.write_str(if self.is_tied(l) { "1" } else { "0" })?;
        }
        match self.gan_attach {
            GanAttach::None => Ok(()),
            GanAttach::EmbeddingEncoder => f.write_str("+embGAN"),
            GanAttach::AttentionOutput => f.write_str("+attGAN"),
        }
    }
}

impl FromStr for TyingConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (bits, suffix) = match s.split_once('+') {
            Some((b, a)) => (b, Some(a)),
            None => (s, None),
        };
        let flags: Vec<bool> = bits
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(Error::Config(format!("tying string {s:?}: expected 0/1, got {c:?}"))),
            })
            .collect::<Result<_>>()?;
        if flags.len() != 4 {
            return Err(Error::Config(format!("tying string {s:?} needs four flags")));
        }
        let gan_attach = match suffix {
            None => GanAttach::None,
            Some("embGAN") => GanAttach::EmbeddingEncoder,
            Some("attGAN") => GanAttach::AttentionOutput,
            Some(other) => return Err(Error::Config(format!("unknown GAN attach point {other:?}"))),
        };
        Ok(TyingConfig {
            tie_l1: flags[0],
            tie_l2: flags[1],
            tie_l3: flags[2],
            tie_l4: flags[3],
            gan_attach,
        })
    }
}

/// Tie flags for L1..L4 in the layer-tying study.
pub const STUDIED_TYINGS: [&str; 8] = ["1111", "0111", "0011", "0101", "0110", "1001", "1010", "1100"];

/// Source and target models over one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct PairedModel {
    pub source: QaModel,
    pub target: QaModel,
    pub tying: TyingConfig,
}

impl PairedModel {
    /// A fresh source model under `source.*` tied into a pair.
    pub fn new(store: &mut ParamStore, config: &ModelConfig, seed: u64, tying: TyingConfig) -> Result<Self> {
        let source = QaModel::new(store, config, seed, "source")?;
        tie_layers(store, &source, config, tying)
    }

    pub fn model(&self, domain: Domain) -> &QaModel {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    /// Every distinct parameter of both models, source first.
    pub fn params(&self) -> Vec<ParamId> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for id in self.source.params().into_iter().chain(self.target.params()) {
            if seen.insert(id) {
                out.push(id);
            }
        }
        out
    }

    /// Distinct parameters of `layers` in both models.
    pub fn layer_params(&self, layers: &[Layer]) -> Vec<ParamId> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for &l in layers {
            for id in self.source.layer_params(l).into_iter().chain(self.target.layer_params(l)) {
                if seen.insert(id) {
                    out.push(id);
                }
            }
        }
        out
    }
}

/// Builds the target model from `source`: tied layers (and the input
/// embedding) reuse the source storage and are renamed `shared.*`;
/// untied layers get copies under `target.*` that start bitwise equal.
///
/// The source model's parameters must be named `source.*`.
pub fn tie_layers(
    store: &mut ParamStore,
    source: &QaModel,
    target_config: &ModelConfig,
    tying: TyingConfig,
) -> Result<PairedModel> {
    if &source.config != target_config {
        return Err(Error::Config("source and target models need identical ModelConfig".into()));
    }
    let rename = |store: &ParamStore, id: ParamId, to: &str| -> Result<String> {
        let name = store.name(id);
        name.strip_prefix("source.")
            .map(|rest| format!("{to}.{rest}"))
            .ok_or_else(|| Error::Config(format!("parameter {name} is not under source.*")))
    };

    let mut shared: BTreeSet<ParamId> = source.embedding_params().into_iter().collect();
    for l in Layer::ALL {
        if tying.is_tied(l) {
            shared.extend(source.layer_params(l));
        }
    }
    let mut copies: HashMap<ParamId, ParamId> = HashMap::new();
    for id in source.params() {
        if shared.contains(&id) {
            let name = rename(store, id, "shared")?;
            store.rename(id, name);
        } else {
            let name = rename(store, id, "target")?;
            let value = store.value(id).clone();
            copies.insert(id, store.add(name, value));
        }
    }
    let target = source.remap(&mut |id| copies.get(&id).copied().unwrap_or(id));
    Ok(PairedModel {
        source: source.clone(),
        target,
        tying,
    })
}
