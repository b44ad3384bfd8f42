//! Subcommand bodies. Every command computes all of its outputs before
//! writing any, and writes them through [`Staged`].

use std::collections::{BTreeSet, HashSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;
use tempfile::NamedTempFile;

use wrnet::dataio::formats::{encode_flow, encode_pgm, encode_rawf32, sidecar_path, RawSidecar};
use wrnet::dataio::{
    generate_synthetic, load_dataset, load_frame, make_triplets, DatasetManifest, FrameFormat,
    SequenceEntry, SyntheticSpec, TripletMode,
};
use wrnet::metrics::{evaluate, Method};
use wrnet::model::prepare_samples;
use wrnet::warp::{self, Refiner};
use wrnet::{estimate_flow, ScalarField, WrNetModel};

use crate::settings::Settings;
use crate::CliError;

pub fn thread_count() -> usize {
    wrnet::par::threads()
}

/// Keys that describe the model architecture.
pub const MODEL_KEYS: &[&str] = &[
    "embed-channels",
    "enc-levels",
    "base-channels",
    "attention-downsample",
    "residual-output",
    "attention-roles",
];

/// Loads `--checkpoint` if given. When no model key was set explicitly the
/// checkpoint's own architecture becomes the effective one; otherwise the two
/// must agree.
pub fn load_model(
    s: &mut Settings,
    explicit: &BTreeSet<String>,
) -> Result<Option<WrNetModel>, CliError> {
    let Some(path) = s.checkpoint.clone() else {
        return Ok(None);
    };
    let model = if MODEL_KEYS.iter().any(|k| explicit.contains(*k)) {
        WrNetModel::load_expecting(&path, &s.model)?
    } else {
        WrNetModel::load(&path)?
    };
    s.model = model.config().clone();
    Ok(Some(model))
}

/// Output files written together: everything goes to temporaries in the
/// destination directories first and is renamed into place only once every
/// write succeeded.
#[derive(Default)]
struct Staged {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Staged {
    fn add(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.files.push((path, bytes));
    }

    fn frame(
        &mut self,
        path: PathBuf,
        f: &ScalarField,
        format: FrameFormat,
    ) -> Result<(), CliError> {
        match format {
            FrameFormat::Pgm16 => self.add(path, encode_pgm(f)),
            FrameFormat::Rawf32 => {
                let side = RawSidecar {
                    width: f.width(),
                    height: f.height(),
                    normalize: "none".into(),
                };
                let text = serde_json::to_vec(&side).map_err(wrnet::Error::from)?;
                self.add(sidecar_path(&path), text);
                self.add(path, encode_rawf32(f));
            }
        }
        Ok(())
    }

    fn commit(self) -> Result<Vec<PathBuf>, CliError> {
        let mut seen = HashSet::new();
        for (p, _) in &self.files {
            if !seen.insert(p.clone()) {
                return Err(CliError::Usage(format!(
                    "output {} would be written twice",
                    p.display()
                )));
            }
        }
        let io = |p: &Path, e: std::io::Error| CliError::Data(format!("{}: {e}", p.display()));
        let mut temps = Vec::with_capacity(self.files.len());
        for (path, bytes) in &self.files {
            let dir = match path.parent() {
                Some(d) if !d.as_os_str().is_empty() => d,
                _ => Path::new("."),
            };
            let mut tmp = NamedTempFile::new_in(dir).map_err(|e| io(dir, e))?;
            tmp.write_all(bytes).map_err(|e| io(path, e))?;
            tmp.as_file().sync_all().map_err(|e| io(path, e))?;
            temps.push((tmp, path.clone()));
        }
        let mut written = Vec::with_capacity(temps.len());
        for (tmp, path) in temps {
            tmp.persist(&path).map_err(|e| io(&path, e.error))?;
            written.push(path);
        }
        Ok(written)
    }
}

fn load(path: &Path) -> Result<ScalarField, CliError> {
    Ok(load_frame(path, FrameFormat::from_path(path))?)
}

fn load_pair(a: &Path, b: &Path) -> Result<(ScalarField, ScalarField), CliError> {
    let (fa, fb) = (load(a)?, load(b)?);
    fa.ensure_same_dims(&fb)?;
    Ok((fa, fb))
}

/// Expands `{i}` (1-based) and `{alpha}`; several outputs need a placeholder.
fn expand(pattern: &Path, i: usize, alpha: Option<f32>, count: usize) -> Result<PathBuf, CliError> {
    let p = pattern.to_string_lossy();
    if count > 1 && !p.contains("{i}") && !(alpha.is_some() && p.contains("{alpha}")) {
        return Err(CliError::Usage(format!(
            "{count} outputs need a {{i}}{} placeholder in {p:?}",
            if alpha.is_some() { " or {alpha}" } else { "" }
        )));
    }
    let mut out = p.replace("{i}", &(i + 1).to_string());
    if let Some(a) = alpha {
        out = out.replace("{alpha}", &a.to_string());
    }
    Ok(PathBuf::from(out))
}

fn report(written: &[PathBuf]) {
    for p in written {
        eprintln!("wrote {}", p.display());
    }
}

pub fn flow(s: &Settings, a: &Path, b: &Path, out: &Path) -> Result<(), CliError> {
    let (fa, fb) = load_pair(a, b)?;
    // b(x + F) = a(x): F is the motion from a to b.
    let f = estimate_flow(&fa, &fb, &s.tvl1)?;
    let mut staged = Staged::default();
    staged.add(out.to_path_buf(), encode_flow(&f));
    report(&staged.commit()?);
    Ok(())
}

pub fn interp(
    s: &Settings,
    model: Option<&WrNetModel>,
    a: &Path,
    b: &Path,
    out: &Path,
) -> Result<(), CliError> {
    if s.alphas.is_empty() {
        return Err(CliError::Usage("at least one --alpha is required".into()));
    }
    if let Some(bad) = s.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(CliError::Usage(format!(
            "alpha must be in [0, 1], got {bad}"
        )));
    }
    let (fa, fb) = load_pair(a, b)?;
    let flow = warp::interpolation_flow(&fa, &fb, &s.tvl1)?;
    let mut staged = Staged::default();
    for (i, &alpha) in s.alphas.iter().enumerate() {
        let mut frame = warp::interpolate_with_flow(&fa, &flow, alpha)?;
        // alpha = 0 is the first input by definition; nothing to refine.
        if let (Some(m), true) = (model, alpha > 0.0) {
            frame = m.refine_frame(&fa, &fb, &frame)?;
        }
        staged.frame(
            expand(out, i, Some(alpha), s.alphas.len())?,
            &frame,
            s.format,
        )?;
    }
    report(&staged.commit()?);
    Ok(())
}

pub fn extrapolate(
    s: &Settings,
    model: Option<&WrNetModel>,
    a: &Path,
    b: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let steps = s.steps.unwrap_or(1);
    if steps == 0 {
        return Err(CliError::Usage("steps must be >= 1".into()));
    }
    let (fa, fb) = load_pair(a, b)?;
    let frames = warp::rollout(&fa, &fb, steps, &s.tvl1, model.map(|m| m as &dyn Refiner))?;
    let mut staged = Staged::default();
    for (i, f) in frames.iter().enumerate() {
        staged.frame(expand(out, i, None, steps)?, f, s.format)?;
    }
    report(&staged.commit()?);
    Ok(())
}

fn triplets(manifest: &Path, mode: TripletMode) -> Result<Vec<wrnet::dataio::Triplet>, CliError> {
    let mut out = Vec::new();
    for seq in load_dataset(manifest)? {
        out.extend(make_triplets(&seq, 1, mode)?);
    }
    Ok(out)
}

/// `model.json` -> `model.loss.json`.
pub fn loss_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.json")
}

pub fn train(
    s: &Settings,
    warm: Option<WrNetModel>,
    manifest: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let opts = s.train_options();
    s.tvl1.validate()?;
    let data = triplets(manifest, opts.mode)?;
    eprintln!("preparing {} samples", data.len());
    let samples = prepare_samples(&data, opts.mode, &s.tvl1)?;
    let mut model = match warm {
        Some(m) => m,
        None => WrNetModel::new(s.model.clone(), s.seed)?,
    };
    let every = (opts.steps / 20).max(1);
    let history = model.train_samples(&samples, &opts, |step, loss| {
        if step % every == 0 || step + 1 == opts.steps {
            eprintln!("step {step:>6} loss {loss:.6}");
        }
    })?;

    // The checkpoint is a manifest plus blob pair; write both through the
    // library, then the loss history, only after training succeeded.
    model.save(out)?;
    let history_json = json!({
        "steps": opts.steps,
        "seed": opts.seed,
        "loss": history,
    });
    let mut staged = Staged::default();
    staged.add(
        loss_path(out),
        serde_json::to_vec_pretty(&history_json).map_err(wrnet::Error::from)?,
    );
    let mut written = vec![out.to_path_buf(), wrnet::nn::checkpoint::blob_path(out)];
    written.extend(staged.commit()?);
    report(&written);
    Ok(())
}

pub fn eval(
    s: &Settings,
    model: Option<&WrNetModel>,
    manifest: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let data = triplets(manifest, TripletMode::Interpolation)?;
    let mut methods = vec![Method::Linear, Method::WarpOnly];
    if model.is_some() {
        methods.push(Method::Full);
    }
    let rep = evaluate(&data, &methods, &s.tvl1, model.map(|m| m as &dyn Refiner))?;
    let table = rep.to_string();
    print!("{table}");
    let mut staged = Staged::default();
    staged.add(out.to_path_buf(), rep.to_json()?.into_bytes());
    staged.add(out.with_extension("txt"), table.into_bytes());
    report(&staged.commit()?);
    Ok(())
}

pub fn synth(s: &Settings, spec_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let text = std::fs::read(spec_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", spec_path.display())))?;
    let spec: SyntheticSpec = serde_json::from_slice(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", spec_path.display())))?;
    if s.frames < 3 {
        return Err(CliError::Usage("frames must be >= 3".into()));
    }
    let seq = generate_synthetic(&spec, s.frames)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", out_dir.display())))?;
    let ext = s.format.extension();
    let names: Vec<PathBuf> = (0..seq.frames.len())
        .map(|k| PathBuf::from(format!("frame_{k:03}.{ext}")))
        .collect();
    let mut staged = Staged::default();
    for (f, name) in seq.frames.iter().zip(&names) {
        staged.frame(out_dir.join(name), f, s.format)?;
    }
    let manifest = DatasetManifest {
        format: s.format,
        sequences: vec![SequenceEntry {
            source_id: format!("synth-{}", spec.seed),
            cadence_minutes: spec.cadence_minutes,
            frames: names,
        }],
    };
    staged.add(
        out_dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest).map_err(wrnet::Error::from)?,
    );
    report(&staged.commit()?);
    Ok(())
}
