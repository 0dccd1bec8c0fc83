use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::baselines::{BaselineArchitecture, IcModel, NcModel};
use crate::env::UtilityKind;
use crate::error::{Error, Result};
use crate::fronthaul::{AccessMode, FronthaulModel, ResourcePlan};
use crate::model::{Architecture, CecilModel, HeadPolicy, ModelConfig, PowerPolicy};

pub const CHECKPOINT_FORMAT: &str = "cecil-checkpoint 1";
pub const PARAMS_FILE: &str = "params.txt";
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Cecil,
    Ic,
    Nc,
}

/// Per-EN RB counts; NOMA plans list the shared totals once.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanManifest {
    pub mode: AccessMode,
    pub uplink: Vec<usize>,
    pub downlink: Vec<usize>,
}

impl PlanManifest {
    pub fn from_plan(plan: &ResourcePlan) -> Self {
        let n = plan.ens();
        match plan.mode() {
            AccessMode::Noma => Self {
                mode: AccessMode::Noma,
                uplink: vec![plan.uplink_total()],
                downlink: vec![plan.downlink_total()],
            },
            AccessMode::Oma => Self {
                mode: AccessMode::Oma,
                uplink: (0..n).map(|i| plan.uplink_len(i)).collect(),
                downlink: (0..n).map(|i| plan.downlink_len(i)).collect(),
            },
        }
    }

    pub fn to_plan(&self, n: usize) -> Result<ResourcePlan> {
        match self.mode {
            AccessMode::Noma => match (self.uplink.as_slice(), self.downlink.as_slice()) {
                ([u], [d]) => ResourcePlan::noma(n, *u, *d),
                _ => Err(Error::Format("NOMA plan lists one uplink and one downlink total".into())),
            },
            AccessMode::Oma => {
                if self.uplink.len() != n {
                    return Err(Error::Format(format!("OMA plan covers {} ENs, not {n}", self.uplink.len())));
                }
                ResourcePlan::oma_with_splits(self.uplink.clone(), self.downlink.clone())
            }
        }
    }
}

/// Human-readable description of a saved model, enough to rebuild its
/// parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub scheme: SchemeKind,
    pub n: usize,
    pub seed: u64,
    pub power_budget: f64,
    #[serde(default)]
    pub tied: bool,
    pub utility: UtilityKind,
    pub plan: Option<PlanManifest>,
    pub channel: Option<FronthaulModel>,
    pub heads: Option<HeadPolicy>,
    pub architecture: Option<Architecture>,
    pub baseline: Option<BaselineArchitecture>,
}

/// A model of any learned scheme.
#[derive(Clone, Debug)]
pub enum TrainedPolicy {
    Cecil(CecilModel),
    Ic(IcModel),
    Nc(NcModel),
}

impl TrainedPolicy {
    pub fn policy_mut(&mut self) -> &mut dyn PowerPolicy {
        match self {
            TrainedPolicy::Cecil(m) => m,
            TrainedPolicy::Ic(m) => m,
            TrainedPolicy::Nc(m) => m,
        }
    }

    pub fn policy(&self) -> &dyn PowerPolicy {
        match self {
            TrainedPolicy::Cecil(m) => m,
            TrainedPolicy::Ic(m) => m,
            TrainedPolicy::Nc(m) => m,
        }
    }

    /// Value of the `scheme` result column, e.g. `cecil-noma` or `ic`.
    pub fn label(&self) -> String {
        match self {
            TrainedPolicy::Cecil(m) => format!("cecil-{}", m.plan().mode().label()),
            TrainedPolicy::Ic(_) => "ic".into(),
            TrainedPolicy::Nc(_) => "nc".into(),
        }
    }

    /// `(M_U, M_D)`; zero for schemes without fronthaul.
    pub fn resource_blocks(&self) -> (usize, usize) {
        match self {
            TrainedPolicy::Cecil(m) => (m.plan().uplink_total(), m.plan().downlink_total()),
            _ => (0, 0),
        }
    }

    pub fn manifest(&self) -> CheckpointManifest {
        let p = self.policy();
        let mut m = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            scheme: SchemeKind::Cecil,
            n: p.ens(),
            seed: 0,
            power_budget: p.power_budget(),
            tied: false,
            utility: p.utility(),
            plan: None,
            channel: None,
            heads: None,
            architecture: None,
            baseline: None,
        };
        match self {
            TrainedPolicy::Cecil(model) => {
                let c = model.config();
                m.seed = c.seed;
                m.tied = c.tied;
                m.plan = Some(PlanManifest::from_plan(&c.plan));
                m.channel = Some(c.channel.clone());
                m.heads = Some(c.heads);
                m.architecture = Some(c.architecture);
            }
            TrainedPolicy::Ic(model) => {
                m.scheme = SchemeKind::Ic;
                m.seed = model.seed();
                m.baseline = Some(model.architecture());
            }
            TrainedPolicy::Nc(model) => {
                m.scheme = SchemeKind::Nc;
                m.seed = model.seed();
                m.baseline = Some(model.architecture());
            }
        }
        m
    }

    /// A freshly initialized model with the manifest's layout.
    pub fn from_manifest(m: &CheckpointManifest) -> Result<Self> {
        if m.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unsupported checkpoint format {:?}", m.format)));
        }
        let missing = |what: &str| Error::Format(format!("{:?} checkpoint without {what}", m.scheme));
        Ok(match m.scheme {
            SchemeKind::Cecil => {
                let plan = m.plan.as_ref().ok_or_else(|| missing("plan"))?.to_plan(m.n)?;
                let channel = m.channel.clone().ok_or_else(|| missing("channel"))?;
                let config = ModelConfig {
                    plan,
                    channel,
                    utility: m.utility,
                    power_budget: m.power_budget,
                    heads: m.heads.ok_or_else(|| missing("heads"))?,
                    architecture: m.architecture.ok_or_else(|| missing("architecture"))?,
                    tied: m.tied,
                    seed: m.seed,
                };
                TrainedPolicy::Cecil(CecilModel::new(config)?)
            }
            SchemeKind::Ic => {
                let arch = m.baseline.ok_or_else(|| missing("baseline architecture"))?;
                TrainedPolicy::Ic(IcModel::with_budget(m.n, m.utility, arch, m.power_budget, m.seed)?)
            }
            SchemeKind::Nc => {
                let arch = m.baseline.ok_or_else(|| missing("baseline architecture"))?;
                TrainedPolicy::Nc(NcModel::with_budget(m.n, m.utility, arch, m.power_budget, m.seed)?)
            }
        })
    }

    /// Writes `params.txt` and `manifest.toml` into `dir`, creating it.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.policy().params().save(dir.join(PARAMS_FILE))?;
        let text = toml::to_string(&self.manifest()).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let manifest = read_manifest(&dir)?;
        let mut model = Self::from_manifest(&manifest)?;
        let params = ParamStore::load(dir.as_ref().join(PARAMS_FILE))?;
        model
            .policy_mut()
            .params_mut()
            .copy_from(&params)
            .map_err(|e| Error::config(format!("checkpoint does not match its manifest: {e}")))?;
        Ok(model)
    }
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::sample_batch;
    use crate::rng::seeded;

    fn small_cecil(channel: FronthaulModel) -> CecilModel {
        let mut cfg = ModelConfig::new(
            ResourcePlan::oma(3, 7, 4).unwrap(),
            channel,
            UtilityKind::energy_efficiency(),
            21,
        );
        cfg.architecture = Architecture {
            encoder_depth: 2,
            encoder_hidden: 4,
            cloud_depth: 2,
            cloud_hidden: 6,
            decision_depth: 2,
            decision_hidden: 4,
        };
        CecilModel::new(cfg).unwrap()
    }

    #[test]
    fn cecil_round_trip_reproduces_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = TrainedPolicy::Cecil(small_cecil(FronthaulModel::from_bits(2)));
        // perturb so the saved values differ from a fresh init
        let batch = sample_batch(16, 3, &mut seeded(1));
        model.policy_mut().powers(&batch, &FronthaulModel::from_bits(2), &mut seeded(2)).unwrap();
        if let TrainedPolicy::Cecil(m) = &mut model {
            let id = m.params().find("cloud.w0").unwrap();
            m.params_mut().get_mut(id).mapv_inplace(|v| v * 1.5);
        }
        model.save(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.contains("scheme = \"cecil\""), "{text}");
        let mut loaded = TrainedPolicy::load(dir.path()).unwrap();
        assert_eq!(loaded.manifest(), model.manifest());
        assert_eq!(loaded.label(), "cecil-oma");
        assert_eq!(loaded.resource_blocks(), (7, 4));
        let ch = FronthaulModel::from_bits(2);
        let a = model.policy_mut().powers(&batch, &ch, &mut seeded(3)).unwrap();
        let b = loaded.policy_mut().powers(&batch, &ch, &mut seeded(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn baselines_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let arch = BaselineArchitecture { depth: 3, hidden: 5 };
        for model in [
            TrainedPolicy::Ic(IcModel::new(3, UtilityKind::SumRate, arch, 4).unwrap()),
            TrainedPolicy::Nc(NcModel::new(3, UtilityKind::SumRate, arch, 4).unwrap()),
        ] {
            model.save(dir.path()).unwrap();
            let loaded = TrainedPolicy::load(dir.path()).unwrap();
            assert_eq!(loaded.manifest(), model.manifest());
            assert_eq!(loaded.policy().params(), model.policy().params());
        }
    }

    #[test]
    fn mismatched_manifest_fails_fast() {
        let dir = tempfile::tempdir().unwrap();
        let model = TrainedPolicy::Cecil(small_cecil(FronthaulModel::Perfect));
        model.save(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), text.replace("uplink = [3, 2, 2]", "uplink = [3, 3, 2]")).unwrap();
        assert!(matches!(TrainedPolicy::load(dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_manifest_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = TrainedPolicy::Cecil(small_cecil(FronthaulModel::Perfect));
        model.save(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), format!("colour = 1\n{text}")).unwrap();
        let err = TrainedPolicy::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }
}
