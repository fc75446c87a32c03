//! Subcommand bodies, kept free of argument parsing and process exit.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::config::{LogitScale, RunConfig};
use super::proxy::{identity_proxy_score, masked_tokens};
use super::tensor_file::{read_tensor, write_tensor, TensorFile};
use crate::attention::BlockTrace;
use crate::error::{Error, Result};
use crate::layout::{flatten_tokens, BinaryMask, LatentGrid, PromptTokens};
use crate::model::VelocityNet;
use crate::oracle::{run_suite, Fault, SuiteReport};
use crate::sampler::{run_sampling, PipelineInputs, SamplingOutput};

pub const GENERATED_FILE: &str = "generated.icbt";
pub const ALPHA_TRACE_FILE: &str = "alpha_trace.icbt";
pub const HEAD_ACTIVATION_FILE: &str = "head_activation.icbt";

/// Seeded toy inputs sized by `cfg`: a subject blob on the reference, a
/// smooth textured target and a centred rectangular insertion mask.
pub fn synthetic_inputs(cfg: &RunConfig, seed: u64) -> Result<PipelineInputs> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f32 { StandardNormal.sample(&mut rng) };
    let c = cfg.channels;
    let (rh, rw) = (cfg.ref_height, cfg.ref_width);
    let (th, tw) = (cfg.target_height, cfg.target_width);

    let signature: Vec<f32> = (0..c).map(|_| 1.0 + normal()).collect();
    let mut reference = LatentGrid::zeros(rh, rw, c);
    let mut ref_mask = BinaryMask::zeros(rh, rw);
    let (cy, cx) = ((rh as f32 - 1.0) / 2.0, (rw as f32 - 1.0) / 2.0);
    let (ry, rx) = ((rh as f32 * 0.35).max(0.5), (rw as f32 * 0.35).max(0.5));
    for r in 0..rh {
        for col in 0..rw {
            let dy = (r as f32 - cy) / ry;
            let dx = (col as f32 - cx) / rx;
            let inside = dy * dy + dx * dx <= 1.0;
            ref_mask.set(r, col, inside);
            for (k, v) in reference.token_mut(r, col).iter_mut().enumerate() {
                *v = if inside {
                    signature[k] + 0.1 * normal()
                } else {
                    0.3 * normal()
                };
            }
        }
    }

    let mut target = LatentGrid::zeros(th, tw, c);
    for r in 0..th {
        for col in 0..tw {
            for (k, v) in target.token_mut(r, col).iter_mut().enumerate() {
                let kf = k as f32;
                *v = 0.5 * (0.7 * r as f32 + 1.3 * kf).sin()
                    + 0.5 * (0.5 * col as f32 + kf).cos()
                    + 0.05 * normal();
            }
        }
    }

    let mut mask = BinaryMask::zeros(th, tw);
    let (r0, r1) = (th / 4, (3 * th).div_ceil(4).max(th / 4 + 1));
    let (c0, c1) = (tw / 4, (3 * tw).div_ceil(4).max(tw / 4 + 1));
    for r in r0..r1.min(th) {
        for col in c0..c1.min(tw) {
            mask.set(r, col, true);
        }
    }

    Ok(PipelineInputs {
        prompt: PromptTokens::seeded(cfg.prompt_len, c, seed.wrapping_add(1))?,
        reference,
        target,
        mask,
        reference_mask: Some(ref_mask),
    })
}

/// Writes synthetic inputs into `out`, one tensor file each.
pub fn cmd_gen_inputs(cfg: &RunConfig, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let inputs = synthetic_inputs(cfg, seed)?;
    let mut written = Vec::new();
    let mut put = |name: &str, t: TensorFile| -> Result<()> {
        let p = out.join(name);
        write_tensor(&p, &t)?;
        written.push(p);
        Ok(())
    };
    put("prompt.icbt", inputs.prompt.embeddings().into())?;
    put("reference.icbt", (&inputs.reference).into())?;
    put("target.icbt", (&inputs.target).into())?;
    put("mask.icbt", (&inputs.mask).into())?;
    if let Some(m) = &inputs.reference_mask {
        put("reference_mask.icbt", m.into())?;
    }
    Ok(written)
}

pub fn load_inputs(cfg: &RunConfig) -> Result<PipelineInputs> {
    let (Some(p), Some(r), Some(t), Some(m)) =
        (&cfg.prompt, &cfg.reference, &cfg.target, &cfg.mask)
    else {
        return synthetic_inputs(cfg, cfg.input_seed);
    };
    let inputs = PipelineInputs {
        prompt: read_tensor(p)?.into_prompt()?,
        reference: read_tensor(r)?.into_grid()?,
        target: read_tensor(t)?.into_grid()?,
        mask: read_tensor(m)?.into_mask()?,
        reference_mask: match &cfg.reference_mask {
            Some(path) => Some(read_tensor(path)?.into_mask()?),
            None => None,
        },
    };
    let channels = [
        inputs.prompt.channels(),
        inputs.reference.channels(),
        inputs.target.channels(),
    ];
    if channels.iter().any(|&ch| ch != cfg.channels) {
        return Err(Error::shape(format!(
            "input channels {channels:?} do not match channels={}",
            cfg.channels
        )));
    }
    Ok(inputs)
}

pub fn build_model(cfg: &RunConfig) -> Result<VelocityNet> {
    let net = VelocityNet::seeded(cfg.model_dims(), cfg.weights_seed)?;
    match cfg.logit_scale {
        LogitScale::Auto => Ok(net),
        LogitScale::Fixed(s) => net.with_logit_scale(s),
    }
}

/// Result of one insertion run, before anything is written.
#[derive(Clone, Debug)]
pub struct InsertRun {
    pub inputs: PipelineInputs,
    pub output: SamplingOutput,
    /// `None` when the insertion mask is empty.
    pub score: Option<f64>,
}

impl InsertRun {
    pub fn generated_file(&self) -> TensorFile {
        (&self.output.generated).into()
    }

    /// Writes the generated latents and both traces into `dir`. Returns the
    /// generated file's path and SHA-256.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, String)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes = self.generated_file().encode();
        let path = dir.join(GENERATED_FILE);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        write_tensor(&dir.join(ALPHA_TRACE_FILE), &self.alpha_trace())?;
        write_tensor(&dir.join(HEAD_ACTIVATION_FILE), &self.head_activation())?;
        Ok((path, sha256_hex(&bytes)))
    }

    pub fn generated_sha256(&self) -> String {
        sha256_hex(&self.generated_file().encode())
    }

    /// `[steps, blocks, heads, 3]`.
    pub fn alpha_trace(&self) -> TensorFile {
        trace_tensor(&self.output.traces, 3, |bt, h| {
            bt.alpha_means[h].iter().map(|&a| a as f32).collect()
        })
    }

    /// `[steps, blocks, heads, 2]` holding raw and normalised activation.
    pub fn head_activation(&self) -> TensorFile {
        trace_tensor(&self.output.traces, 2, |bt, h| {
            vec![bt.activation.raw()[h], bt.activation.normalized()[h]]
        })
    }
}

fn trace_tensor(
    traces: &[Vec<BlockTrace>],
    width: usize,
    row: impl Fn(&BlockTrace, usize) -> Vec<f32>,
) -> TensorFile {
    let blocks = traces.first().map_or(0, Vec::len);
    let heads = traces
        .first()
        .and_then(|s| s.first())
        .map_or(0, |bt| bt.alpha_means.len());
    let mut data = Vec::with_capacity(traces.len() * blocks * heads * width);
    for step in traces {
        for bt in step {
            for h in 0..heads {
                data.extend(row(bt, h));
            }
        }
    }
    TensorFile {
        dims: vec![traces.len(), blocks, heads, width],
        data,
    }
}

pub fn run_insert(cfg: &RunConfig, inputs: PipelineInputs) -> Result<InsertRun> {
    let model = build_model(cfg)?;
    let output = run_sampling(&inputs, &model, &cfg.sampler()?, &cfg.mechanisms()?)?;
    let score = proxy_for(&inputs, &output)?;
    Ok(InsertRun {
        inputs,
        output,
        score,
    })
}

fn proxy_for(inputs: &PipelineInputs, output: &SamplingOutput) -> Result<Option<f64>> {
    if inputs.mask.count_ones() == 0 {
        return Ok(None);
    }
    let generated = masked_tokens(&output.generated, &inputs.mask)?;
    let reference = match &inputs.reference_mask {
        Some(m) if m.count_ones() > 0 => masked_tokens(&inputs.reference, m)?,
        _ => flatten_tokens(&inputs.reference),
    };
    identity_proxy_score(&generated, &reference).map(Some)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

#[derive(Clone, Debug)]
pub struct InsertReport {
    pub run: InsertRun,
    pub generated_path: PathBuf,
    pub sha256: String,
}

impl InsertReport {
    pub fn summary(&self) -> String {
        let score = match self.run.score {
            Some(s) => format!("{s:.8e}"),
            None => "undefined (empty mask)".to_string(),
        };
        format!(
            "identity_proxy_score={score}\nsha256({})={}\n",
            self.generated_path.display(),
            self.sha256
        )
    }
}

pub fn cmd_insert(cfg: &RunConfig) -> Result<InsertReport> {
    let run = run_insert(cfg, load_inputs(cfg)?)?;
    let (generated_path, sha256) = run.write(&cfg.out_dir)?;
    Ok(InsertReport {
        run,
        generated_path,
        sha256,
    })
}

pub fn cmd_verify(trials: usize, seed: u64, inject_fault: bool) -> Result<SuiteReport> {
    let fault = inject_fault.then_some(Fault::PerturbAlpha(0.05));
    run_suite(trials, seed, fault)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Alpha1,
    Alpha2,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha1 => "alpha1",
            SweepParam::Alpha2 => "alpha2",
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha1" => Ok(SweepParam::Alpha1),
            "alpha2" => Ok(SweepParam::Alpha2),
            _ => Err(Error::InvalidArgument(format!(
                "cannot sweep '{s}', use alpha1 or alpha2"
            ))),
        }
    }
}

/// CSV with one row per swept value: the value, the shift-term norm at the
/// first step in the first edited block, and the proxy score.
pub fn cmd_ablate(cfg: &RunConfig, param: SweepParam, values: &[f32]) -> Result<String> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("empty sweep".into()));
    }
    let inputs = load_inputs(cfg)?;
    let block = cfg
        .enabled_blocks
        .as_ref()
        .and_then(|b| b.iter().min().copied())
        .unwrap_or(0);
    let mut csv = format!("{},shift_norm,identity_proxy_score\n", param.name());
    for &v in values {
        let mut c = cfg.clone();
        let key = param.name();
        c.set(key, &v.to_string()).map_err(Error::InvalidArgument)?;
        let run = run_insert(&c, inputs.clone())?;
        let shift_norm = run.output.traces[0][block].shift_norm;
        let score = run
            .score
            .map_or_else(|| "undefined".to_string(), |s| format!("{s:.8e}"));
        let _ = writeln!(csv, "{v},{shift_norm:.8e},{score}");
    }
    Ok(csv)
}

pub fn parse_values(list: &str) -> Result<Vec<f32>> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse::<f32>()
                .map_err(|_| Error::InvalidArgument(format!("bad sweep value '{s}'")))
        })
        .collect()
}
