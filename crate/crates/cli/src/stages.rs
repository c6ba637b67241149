//! Pipeline stages and the artifact store.
//!
//! Artifacts live under `<out>/<config-hash>/`, each next to a
//! `.prov.json` sidecar carrying the config hash, seed and tool version
//! (timestamps appear only there). A stage whose outputs all exist with
//! the current config hash is a verified no-op on rerun.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::json;

use uaplab_core::ensemble::{evaluate_ensemble, Ensemble, Voting};
use uaplab_core::evalkit::{
    accuracy, fooling_rate, targeted_fooling_rate, tfr_distribution, transfer_matrix, EvalReport,
    ReportRow,
};
use uaplab_core::seeds::{derive, fnv1a64};
use uaplab_core::styshapes::{
    bundle_sidecar, cue_conflict_set, generate_dataset, load_bundle, save_bundle,
    shape_bias_score, stylize, DatasetBundle, RenderSpec, Split,
};
use uaplab_core::uap::{
    epsilon_sweep, load_perturbation, perturbation_to_ppm, random_noise_baseline, save_perturbation,
    targeted_sweep, AttackConfig, AttackMode, Perturbation,
};
use uaplab_core::zoo::{
    load_weights, save_weights, train_regime, ArchName, ModelHandle, Regime, TrainConfig,
};

use crate::config::ExperimentConfig;
use crate::{CliError, Result};

/// Optional narrowing of a stage to one ε or one regime.
#[derive(Debug, Clone, Default)]
pub struct Filters {
    pub epsilon: Option<f32>,
    pub regime: Option<Regime>,
}

impl Filters {
    fn keeps_eps(&self, e: f32) -> bool {
        self.epsilon.is_none_or(|f| f == e)
    }

    fn keeps_regime(&self, r: Regime) -> bool {
        self.regime.is_none_or(|f| f == r)
    }
}

/// What a stage did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    UpToDate,
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub filters: Filters,
    root: PathBuf,
    hash_hex: String,
}

/// ε rendered without a trailing `.0`, for stable file names and keys.
fn fmt_eps(e: f32) -> String {
    if e == e.trunc() {
        format!("{}", e as i64)
    } else {
        format!("{e}")
    }
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, out_dir: &Path, filters: Filters) -> Result<Self> {
        cfg.validate()?;
        let hash_hex = format!("{:016x}", cfg.content_hash());
        let root = out_dir.join(&hash_hex);
        for sub in ["bundles", "models", "uaps", "reports", "images"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Pipeline {
            cfg,
            filters,
            root,
            hash_hex,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    // ── Artifact bookkeeping ────────────────────────────────────────

    fn prov_path(path: &Path) -> PathBuf {
        let mut os = path.as_os_str().to_owned();
        os.push(".prov.json");
        PathBuf::from(os)
    }

    fn write_artifact(&self, path: &Path, bytes: &[u8], extra: serde_json::Value) -> Result<()> {
        fs::write(path, bytes)?;
        let prov = json!({
            "config_hash": self.hash_hex,
            "seed": self.cfg.seed,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "created_unix": SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            "detail": extra,
        });
        fs::write(Self::prov_path(path), serde_json::to_vec_pretty(&prov)?)?;
        Ok(())
    }

    /// True when the artifact exists and was produced by this config.
    fn is_current(&self, path: &Path) -> bool {
        if !path.is_file() {
            return false;
        }
        let Ok(prov) = fs::read(Self::prov_path(path)) else {
            return false;
        };
        let Ok(value) = serde_json::from_slice::<serde_json::Value>(&prov) else {
            return false;
        };
        value["config_hash"].as_str() == Some(self.hash_hex.as_str())
    }

    fn read_artifact(&self, path: &Path) -> Result<Vec<u8>> {
        if !self.is_current(path) {
            return Err(CliError::MissingArtifact { path: path.to_path_buf() });
        }
        Ok(fs::read(path)?)
    }

    fn artifact_detail(&self, path: &Path) -> Result<serde_json::Value> {
        let prov = fs::read(Self::prov_path(path)).map_err(|_| CliError::MissingArtifact {
            path: Self::prov_path(path),
        })?;
        let value: serde_json::Value = serde_json::from_slice(&prov)?;
        Ok(value["detail"].clone())
    }

    // ── Paths ───────────────────────────────────────────────────────

    pub fn bundle_path(&self, name: &str) -> PathBuf {
        self.root.join("bundles").join(format!("{name}.uapd"))
    }

    pub fn model_path(&self, arch: ArchName, regime: Regime) -> PathBuf {
        self.root.join("models").join(format!("{arch}-{regime}.uapw"))
    }

    pub fn uap_path(&self, arch: &str, regime: &str, eps: f32, mode: &str) -> PathBuf {
        self.root
            .join("uaps")
            .join(format!("{arch}-{regime}-eps{}-{mode}.uapp", fmt_eps(eps)))
    }

    pub fn noise_path(&self, eps: f32) -> PathBuf {
        self.root.join("uaps").join(format!("noise-eps{}.uapp", fmt_eps(eps)))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    // ── Derived seeds ───────────────────────────────────────────────

    fn dataset_seed(&self) -> u64 {
        derive(self.cfg.seed, "dataset", &[])
    }

    fn conflict_seed(&self) -> u64 {
        derive(self.cfg.seed, "conflict", &[])
    }

    fn train_seed(&self, arch: ArchName, regime: Regime) -> u64 {
        derive(
            self.cfg.seed,
            "train",
            &[fnv1a64(arch.as_str().as_bytes()), fnv1a64(regime.as_str().as_bytes())],
        )
    }

    fn attack_seed(&self, arch: ArchName, regime: Regime, mode: &str) -> u64 {
        derive(
            self.cfg.seed,
            "attack",
            &[
                fnv1a64(arch.as_str().as_bytes()),
                fnv1a64(regime.as_str().as_bytes()),
                fnv1a64(mode.as_bytes()),
            ],
        )
    }

    // ── Deterministic regeneration of render-provenance bundles ────

    fn regen_base(&self) -> Result<DatasetBundle> {
        Ok(generate_dataset(
            &RenderSpec::default(),
            self.cfg.dataset.n_train,
            self.cfg.dataset.n_test,
            self.dataset_seed(),
        )?)
    }

    fn regen_conflict(&self) -> Result<DatasetBundle> {
        Ok(cue_conflict_set(
            &RenderSpec::default(),
            self.cfg.eval.conflict_images,
            self.conflict_seed(),
        )?)
    }

    /// Regenerate a bundle and verify it matches the persisted artifact.
    fn load_verified_bundle(&self, name: &str, regen: DatasetBundle) -> Result<DatasetBundle> {
        let path = self.bundle_path(name);
        let bytes = self.read_artifact(&path)?;
        let persisted = load_bundle(&bytes)?;
        if persisted.checksum() != regen.checksum() {
            return Err(CliError::Invariant {
                message: format!(
                    "bundle {} does not match its regeneration from the config seed",
                    path.display()
                ),
            });
        }
        Ok(regen)
    }

    // ── Model plumbing ──────────────────────────────────────────────

    /// (arch, regime) pairs trained by this config: the primary arch per
    /// regime, then cross architectures under IN.
    pub fn model_matrix(&self) -> Vec<(ArchName, Regime)> {
        let mut out: Vec<(ArchName, Regime)> = self
            .cfg
            .regimes()
            .into_iter()
            .map(|r| (self.cfg.primary_arch(), r))
            .collect();
        for arch in self.cfg.cross_archs() {
            out.push((arch, Regime::In));
        }
        out
    }

    fn filtered_model_matrix(&self) -> Vec<(ArchName, Regime)> {
        self.model_matrix()
            .into_iter()
            .filter(|&(_, r)| self.filters.keeps_regime(r))
            .collect()
    }

    fn load_model(&self, arch: ArchName, regime: Regime) -> Result<ModelHandle> {
        let path = self.model_path(arch, regime);
        let bytes = self.read_artifact(&path)?;
        let mut model = load_weights(&bytes)?;
        let detail = self.artifact_detail(&path)?;
        let regime_str = detail["regime"].as_str().unwrap_or("other");
        model.set_regime(Regime::parse(regime_str).unwrap_or(Regime::Other));
        if let Some(seed) = detail["train_seed"].as_u64() {
            model.set_train_seed(seed);
        }
        if model.regime() != regime {
            return Err(CliError::Invariant {
                message: format!(
                    "model {} carries regime {}, expected {}",
                    path.display(),
                    model.regime(),
                    regime
                ),
            });
        }
        Ok(model)
    }

    fn load_uap(&self, path: &Path) -> Result<Perturbation> {
        let bytes = self.read_artifact(path)?;
        Ok(load_perturbation(&bytes)?)
    }

    // ── Stages ──────────────────────────────────────────────────────

    pub fn gen_data(&self) -> Result<StageOutcome> {
        let outputs = ["base", "stylized", "conflict"].map(|n| self.bundle_path(n));
        if outputs.iter().all(|p| self.is_current(p)) {
            return Ok(StageOutcome::UpToDate);
        }
        let spec = RenderSpec::default();
        let base = self.regen_base()?;
        let stylized = stylize(&base, derive(base.seed(), "stylize", &[]))?;
        let conflict = self.regen_conflict()?;
        for (name, bundle) in [("base", &base), ("stylized", &stylized), ("conflict", &conflict)] {
            self.write_artifact(
                &self.bundle_path(name),
                &save_bundle(bundle),
                bundle_sidecar(bundle, &spec),
            )?;
        }
        Ok(StageOutcome::Ran)
    }

    pub fn train(&self) -> Result<StageOutcome> {
        let jobs = self.filtered_model_matrix();
        if jobs
            .iter()
            .all(|&(a, r)| self.is_current(&self.model_path(a, r)))
        {
            return Ok(StageOutcome::UpToDate);
        }
        let base = self.load_verified_bundle("base", self.regen_base()?)?;
        for (arch, regime) in jobs {
            let path = self.model_path(arch, regime);
            if self.is_current(&path) {
                continue;
            }
            let tcfg = TrainConfig {
                epochs: self.cfg.train.epochs,
                batch_size: self.cfg.train.batch_size,
                learning_rate: self.cfg.train.learning_rate,
                momentum: self.cfg.train.momentum,
                seed: self.train_seed(arch, regime),
            };
            let (model, report) = train_regime(arch, regime, &base, &tcfg)?;
            self.write_artifact(
                &path,
                &save_weights(&model),
                json!({
                    "regime": regime.as_str(),
                    "train_seed": tcfg.seed,
                    "test_accuracy": report.test_accuracy,
                    "final_train_loss": report.final_train_loss,
                    "steps": report.steps,
                }),
            )?;
        }
        Ok(StageOutcome::Ran)
    }

    /// Untargeted sweep ε values for a regime-model source.
    fn sweep_eps(&self) -> Vec<f32> {
        self.cfg
            .attack
            .epsilons
            .iter()
            .copied()
            .filter(|&e| self.filters.keeps_eps(e))
            .collect()
    }

    fn attack_template(&self, eps: f32, seed: u64) -> AttackConfig {
        AttackConfig {
            epsilon: eps,
            iterations: self.cfg.attack.iterations,
            batch_size: self.cfg.attack.batch_size,
            step_size: self
                .cfg
                .attack
                .step_size
                .unwrap_or((eps / 255.0) / 10.0),
            seed,
        }
    }

    /// Expected perturbation artifacts under the current filters, as
    /// (path, kind) where kind distinguishes how it is produced.
    fn attack_plan(&self) -> Vec<AttackJob> {
        let mut plan = Vec::new();
        let primary = self.cfg.attack.primary_epsilon;
        let primary_arch = self.cfg.primary_arch();
        for regime in self.cfg.regimes() {
            if !self.filters.keeps_regime(regime) {
                continue;
            }
            plan.push(AttackJob::Sweep {
                arch: primary_arch,
                regime,
            });
        }
        if self.filters.keeps_eps(primary) {
            for arch in self.cfg.cross_archs() {
                if self.filters.keeps_regime(Regime::In) {
                    plan.push(AttackJob::PrimaryOnly { arch, regime: Regime::In });
                }
            }
            for name in &self.cfg.attack.targeted_regimes {
                let regime = Regime::parse(name).expect("validated");
                if self.filters.keeps_regime(regime) {
                    plan.push(AttackJob::Targeted {
                        arch: primary_arch,
                        regime,
                    });
                }
            }
        }
        plan.push(AttackJob::Noise);
        plan
    }

    fn job_outputs(&self, job: &AttackJob) -> Vec<PathBuf> {
        match job {
            AttackJob::Sweep { arch, regime } => self
                .sweep_eps()
                .iter()
                .map(|&e| self.uap_path(arch.as_str(), regime.as_str(), e, "untargeted"))
                .collect(),
            AttackJob::PrimaryOnly { arch, regime } => vec![self.uap_path(
                arch.as_str(),
                regime.as_str(),
                self.cfg.attack.primary_epsilon,
                "untargeted",
            )],
            AttackJob::Targeted { arch, regime } => (0..10)
                .map(|y| {
                    self.uap_path(
                        arch.as_str(),
                        regime.as_str(),
                        self.cfg.attack.primary_epsilon,
                        &format!("targeted{y}"),
                    )
                })
                .collect(),
            AttackJob::Noise => self.sweep_eps().iter().map(|&e| self.noise_path(e)).collect(),
        }
    }

    pub fn attack(&self) -> Result<StageOutcome> {
        let plan = self.attack_plan();
        let all_outputs: Vec<PathBuf> = plan.iter().flat_map(|j| self.job_outputs(j)).collect();
        if all_outputs.iter().all(|p| self.is_current(p)) {
            return Ok(StageOutcome::UpToDate);
        }
        let base = self.load_verified_bundle("base", self.regen_base()?)?;
        let subset = self.cfg.attack.attack_images;
        let primary = self.cfg.attack.primary_epsilon;

        for job in &plan {
            if self.job_outputs(job).iter().all(|p| self.is_current(p)) {
                continue;
            }
            match job {
                AttackJob::Sweep { arch, regime } => {
                    let model = self.load_model(*arch, *regime)?;
                    let template =
                        self.attack_template(primary, self.attack_seed(*arch, *regime, "untargeted"));
                    let uaps =
                        epsilon_sweep(&model, &base, Split::Train, subset, &template, &self.sweep_eps())?;
                    for uap in uaps {
                        self.store_uap(
                            &self.uap_path(arch.as_str(), regime.as_str(), uap.epsilon, "untargeted"),
                            &uap,
                        )?;
                    }
                }
                AttackJob::PrimaryOnly { arch, regime } => {
                    let model = self.load_model(*arch, *regime)?;
                    let cfg =
                        self.attack_template(primary, self.attack_seed(*arch, *regime, "untargeted"));
                    let uap = uaplab_core::uap::sgd_uap_subset(
                        &model,
                        &base,
                        Split::Train,
                        subset,
                        &cfg,
                        AttackMode::Untargeted,
                    )?;
                    self.store_uap(
                        &self.uap_path(arch.as_str(), regime.as_str(), primary, "untargeted"),
                        &uap,
                    )?;
                }
                AttackJob::Targeted { arch, regime } => {
                    let model = self.load_model(*arch, *regime)?;
                    let template =
                        self.attack_template(primary, self.attack_seed(*arch, *regime, "targeted"));
                    let uaps = targeted_sweep(&model, &base, Split::Train, subset, &template)?;
                    for (y, uap) in uaps.iter().enumerate() {
                        self.store_uap(
                            &self.uap_path(
                                arch.as_str(),
                                regime.as_str(),
                                primary,
                                &format!("targeted{y}"),
                            ),
                            uap,
                        )?;
                    }
                }
                AttackJob::Noise => {
                    for &e in &self.sweep_eps() {
                        let noise =
                            random_noise_baseline(e, derive(self.cfg.seed, "noise", &[e.to_bits() as u64]))?;
                        self.store_uap(&self.noise_path(e), &noise)?;
                    }
                }
            }
        }
        Ok(StageOutcome::Ran)
    }

    /// Persist a perturbation, then re-read it and enforce ball
    /// membership on the stored payload.
    fn store_uap(&self, path: &Path, uap: &Perturbation) -> Result<()> {
        self.write_artifact(
            path,
            &save_perturbation(uap),
            json!({
                "epsilon": uap.epsilon,
                "mode": uap.mode.as_str(),
                "achieved": uap.achieved,
                "fell_back_to_zero": uap.fell_back_to_zero,
            }),
        )?;
        let reread = load_perturbation(&fs::read(path)?)?;
        if !reread.within_ball() {
            return Err(CliError::Invariant {
                message: format!(
                    "perturbation {} violates its ball: max|delta| {} > {}/255 + 1e-6",
                    path.display(),
                    reread.linf_norm(),
                    reread.epsilon
                ),
            });
        }
        Ok(())
    }

    fn clean_row(model: &ModelHandle, metric: &str, value: f64, n: usize) -> ReportRow {
        ReportRow {
            uap_id: "clean".into(),
            source_model: "-".into(),
            source_regime: "-".into(),
            eval_model: model.arch().name.as_str().into(),
            eval_regime: model.regime().as_str().into(),
            epsilon: 0.0,
            mode: "none".into(),
            target: None,
            metric: metric.into(),
            value,
            n,
        }
    }

    fn uap_row(
        uap: &Perturbation,
        model: &ModelHandle,
        metric: &str,
        value: f64,
        n: usize,
    ) -> ReportRow {
        ReportRow {
            uap_id: uap.id(),
            source_model: uap.source.arch.clone(),
            source_regime: uap.source.regime.clone(),
            eval_model: model.arch().name.as_str().into(),
            eval_regime: model.regime().as_str().into(),
            epsilon: uap.epsilon,
            mode: uap.mode.as_str().into(),
            target: uap.mode.target(),
            metric: metric.into(),
            value,
            n,
        }
    }

    pub fn eval(&self) -> Result<StageOutcome> {
        let outputs = [
            self.report_path("eval.csv"),
            self.report_path("sweep.csv"),
            self.report_path("targeted.csv"),
        ];
        if outputs.iter().all(|p| self.is_current(p)) {
            return Ok(StageOutcome::UpToDate);
        }
        let base = self.load_verified_bundle("base", self.regen_base()?)?;
        let conflict = self.load_verified_bundle("conflict", self.regen_conflict()?)?;
        let n_test = base.split_indices(Split::Test).len();
        let primary = self.cfg.attack.primary_epsilon;

        let models: Vec<ModelHandle> = self
            .model_matrix()
            .into_iter()
            .map(|(a, r)| self.load_model(a, r))
            .collect::<Result<_>>()?;

        // eval.csv: clean accuracy, shape bias, primary-ε white-box and
        // noise fooling rates.
        let mut report = EvalReport::new();
        let noise = self.load_uap(&self.noise_path(primary))?;
        for model in &models {
            let acc = accuracy(model, &base, Split::Test)?;
            report.push(Self::clean_row(model, "accuracy", acc, n_test));
            let bias = shape_bias_score(model, &conflict)?;
            report.push(Self::clean_row(model, "shape_bias", bias, conflict.len()));

            let own = self.load_uap(&self.uap_path(
                model.arch().name.as_str(),
                model.regime().as_str(),
                primary,
                "untargeted",
            ))?;
            let fr = fooling_rate(model, &base, Split::Test, &own)?;
            report.push(Self::uap_row(&own, model, "fooling_rate", fr, n_test));
            let fr_noise = fooling_rate(model, &base, Split::Test, &noise)?;
            report.push(Self::uap_row(&noise, model, "fooling_rate", fr_noise, n_test));
        }
        self.write_artifact(
            &self.report_path("eval.csv"),
            report.to_csv().as_bytes(),
            json!({"rows": report.rows.len()}),
        )?;

        // sweep.csv: every sweep perturbation against every model.
        let mut sweep = EvalReport::new();
        for regime in self.cfg.regimes() {
            for &eps in &self.sweep_eps() {
                let uap = self.load_uap(&self.uap_path(
                    self.cfg.primary_arch().as_str(),
                    regime.as_str(),
                    eps,
                    "untargeted",
                ))?;
                for model in &models {
                    let fr = fooling_rate(model, &base, Split::Test, &uap)?;
                    sweep.push(Self::uap_row(&uap, model, "fooling_rate", fr, n_test));
                }
            }
        }
        self.write_artifact(
            &self.report_path("sweep.csv"),
            sweep.to_csv().as_bytes(),
            json!({"rows": sweep.rows.len()}),
        )?;

        // targeted.csv: per-class rates plus distribution summaries.
        let mut targeted = EvalReport::new();
        for name in &self.cfg.attack.targeted_regimes {
            let regime = Regime::parse(name).expect("validated");
            let model = models
                .iter()
                .find(|m| m.regime() == regime && m.arch().name == self.cfg.primary_arch())
                .expect("targeted regime is trained");
            let mut tfrs = Vec::new();
            for y in 0..10u16 {
                let uap = self.load_uap(&self.uap_path(
                    self.cfg.primary_arch().as_str(),
                    regime.as_str(),
                    primary,
                    &format!("targeted{y}"),
                ))?;
                let tfr = targeted_fooling_rate(model, &base, Split::Test, &uap, y as usize)?;
                targeted.push(Self::uap_row(&uap, model, "tfr", tfr, n_test));
                targeted.push(Self::uap_row(
                    &uap,
                    model,
                    "tfr_gen",
                    uap.achieved,
                    self.cfg.attack.attack_images,
                ));
                targeted.push(Self::uap_row(
                    &uap,
                    model,
                    "clean_target_freq_gen",
                    uap.clean_target_freq.unwrap_or(0.0),
                    self.cfg.attack.attack_images,
                ));
                tfrs.push(tfr);
            }
            let dist = tfr_distribution(&tfrs)?;
            let mut push_stat = |metric: &str, value: f64| {
                targeted.push(ReportRow {
                    uap_id: "-".into(),
                    source_model: self.cfg.primary_arch().as_str().into(),
                    source_regime: regime.as_str().into(),
                    eval_model: self.cfg.primary_arch().as_str().into(),
                    eval_regime: regime.as_str().into(),
                    epsilon: primary,
                    mode: "targeted".into(),
                    target: None,
                    metric: metric.into(),
                    value,
                    n: tfrs.len(),
                });
            };
            push_stat("tfr_min", dist.min);
            push_stat("tfr_median", dist.median);
            push_stat("tfr_max", dist.max);
            for (i, &d) in dist.deciles.iter().enumerate() {
                push_stat(&format!("tfr_decile_{}", i + 1), d);
            }
        }
        self.write_artifact(
            &self.report_path("targeted.csv"),
            targeted.to_csv().as_bytes(),
            json!({"rows": targeted.rows.len()}),
        )?;
        Ok(StageOutcome::Ran)
    }

    pub fn transfer(&self) -> Result<StageOutcome> {
        let out = self.report_path("transfer.csv");
        if self.is_current(&out) {
            return Ok(StageOutcome::UpToDate);
        }
        let base = self.load_verified_bundle("base", self.regen_base()?)?;
        let primary = self.cfg.attack.primary_epsilon;
        let n_test = base.split_indices(Split::Test).len();

        let models: Vec<ModelHandle> = self
            .model_matrix()
            .into_iter()
            .map(|(a, r)| self.load_model(a, r))
            .collect::<Result<_>>()?;
        let uaps: Vec<Perturbation> = self
            .model_matrix()
            .into_iter()
            .map(|(a, r)| {
                self.load_uap(&self.uap_path(a.as_str(), r.as_str(), primary, "untargeted"))
            })
            .collect::<Result<_>>()?;

        let model_refs: Vec<&ModelHandle> = models.iter().collect();
        let uap_refs: Vec<&Perturbation> = uaps.iter().collect();
        let matrix = transfer_matrix(&model_refs, &uap_refs, &base, Split::Test, primary)?;

        let mut report = EvalReport::new();
        for (row, uap) in uaps.iter().enumerate() {
            for (col, model) in models.iter().enumerate() {
                report.push(Self::uap_row(
                    uap,
                    model,
                    "fooling_rate",
                    matrix.rates[row][col],
                    n_test,
                ));
            }
        }
        self.write_artifact(
            &out,
            report.to_csv().as_bytes(),
            json!({"rows": report.rows.len(), "epsilon": primary}),
        )?;
        Ok(StageOutcome::Ran)
    }

    pub fn ensemble(&self) -> Result<StageOutcome> {
        let out = self.report_path("ensemble.csv");
        let members_out = self.report_path("ensemble_members.json");
        if self.is_current(&out) && self.is_current(&members_out) {
            return Ok(StageOutcome::UpToDate);
        }
        let base = self.load_verified_bundle("base", self.regen_base()?)?;
        let primary = self.cfg.attack.primary_epsilon;
        let n_test = base.split_indices(Split::Test).len();

        let members: Vec<ModelHandle> = self
            .cfg
            .ensemble
            .members
            .iter()
            .map(|name| {
                self.load_model(self.cfg.primary_arch(), Regime::parse(name).expect("validated"))
            })
            .collect::<Result<_>>()?;
        // Worst-case pool: every untargeted model-sourced perturbation at
        // the primary ε (all regimes plus cross architectures).
        let pool: Vec<Perturbation> = self
            .model_matrix()
            .into_iter()
            .map(|(a, r)| {
                self.load_uap(&self.uap_path(a.as_str(), r.as_str(), primary, "untargeted"))
            })
            .collect::<Result<_>>()?;
        let pool_refs: Vec<&Perturbation> = pool.iter().collect();

        let mut report = EvalReport::new();
        let mut scheme_row = |eval_model: String, metric: &str, value: f64, uap_id: String| {
            report.push(ReportRow {
                uap_id,
                source_model: "-".into(),
                source_regime: "-".into(),
                eval_model,
                eval_regime: "-".into(),
                epsilon: primary,
                mode: "untargeted".into(),
                target: None,
                metric: metric.into(),
                value,
                n: n_test,
            });
        };

        for member in &members {
            let acc = accuracy(member, &base, Split::Test)?;
            let (worst, argmin) =
                uaplab_core::evalkit::worst_case_accuracy(member, &pool_refs, &base, Split::Test)?;
            scheme_row(member.id(), "accuracy", acc, "clean".into());
            scheme_row(member.id(), "worst_case_accuracy", worst, argmin);
        }
        let member_refs: Vec<&ModelHandle> = members.iter().collect();
        for voting in [Voting::Hard, Voting::Soft] {
            let ensemble = Ensemble::new(member_refs.clone(), voting)?;
            let eval = evaluate_ensemble(&ensemble, &base, Split::Test, &pool_refs, primary)?;
            let name = format!("ensemble:{}", voting.as_str());
            scheme_row(name.clone(), "accuracy", eval.clean_accuracy, "clean".into());
            scheme_row(
                name,
                "worst_case_accuracy",
                eval.worst_case_accuracy,
                eval.worst_case_uap,
            );
        }

        self.write_artifact(
            &out,
            report.to_csv().as_bytes(),
            json!({"rows": report.rows.len()}),
        )?;
        let members_json = json!({
            "members": members.iter().map(|m| m.id()).collect::<Vec<_>>(),
            "pool": pool.iter().map(|p| p.id()).collect::<Vec<_>>(),
            "epsilon": primary,
        });
        self.write_artifact(
            &members_out,
            serde_json::to_string_pretty(&members_json)?.as_bytes(),
            json!({}),
        )?;
        Ok(StageOutcome::Ran)
    }

    pub fn export_uaps(&self) -> Result<StageOutcome> {
        let primary = self.cfg.attack.primary_epsilon;
        let mut sources: Vec<PathBuf> = self
            .model_matrix()
            .into_iter()
            .map(|(a, r)| self.uap_path(a.as_str(), r.as_str(), primary, "untargeted"))
            .collect();
        for name in &self.cfg.attack.targeted_regimes {
            sources.push(self.uap_path(
                self.cfg.primary_arch().as_str(),
                name,
                primary,
                "targeted0",
            ));
        }
        let outputs: Vec<PathBuf> = sources.iter().map(|p| self.ppm_path(p)).collect();
        if outputs.iter().all(|p| self.is_current(p)) {
            return Ok(StageOutcome::UpToDate);
        }
        for (src, dst) in sources.iter().zip(&outputs) {
            let uap = self.load_uap(src)?;
            self.write_artifact(dst, &perturbation_to_ppm(&uap), json!({"from": src.file_name().map(|s| s.to_string_lossy().into_owned())}))?;
        }
        Ok(StageOutcome::Ran)
    }

    fn ppm_path(&self, uap_path: &Path) -> PathBuf {
        let stem = uap_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.root.join("images").join(format!("{stem}.ppm"))
    }

    /// The full pipeline, in order.
    pub fn repro(&self) -> Result<Vec<(&'static str, StageOutcome)>> {
        let mut log = vec![("gen-data", self.gen_data()?)];
        log.push(("train", self.train()?));
        log.push(("attack", self.attack()?));
        log.push(("eval", self.eval()?));
        log.push(("transfer", self.transfer()?));
        log.push(("ensemble", self.ensemble()?));
        log.push(("export-uap", self.export_uaps()?));
        Ok(log)
    }
}

#[derive(Debug, Clone)]
enum AttackJob {
    /// Full ε sweep of untargeted perturbations for a regime model.
    Sweep { arch: ArchName, regime: Regime },
    /// Single primary-ε untargeted perturbation (cross architectures).
    PrimaryOnly { arch: ArchName, regime: Regime },
    /// Per-class targeted sweep at the primary ε.
    Targeted { arch: ArchName, regime: Regime },
    /// Sign-noise baselines, one per ε.
    Noise,
}
