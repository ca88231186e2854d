//! Checkpoint directories: `manifest.json` plus one CFT1 file per tensor,
//! named `<layer>.<param>[.task<t>][.phase<p>].cft`. Tensors are always
//! stored at 64-bit so a round trip is bit-exact. Under `stl` the per-task
//! models live in `stl_task<t>/` subdirectories with the same layout.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Architecture, Block, ContinualModel, NormLayer, NormMode};
use super::runner::RunState;
use super::train::{TrainConfig, TrainLog};
use crate::datagen::sha256_hex;
use crate::error::{Error, Result};
use crate::metrics::{AccuracyMatrix, LayerMeanProbe};
use crate::nn::{BatchNormState, Conv2d, Linear, XconvBnBank, XconvRecord};
use crate::tensor::{decode_cft, encode_cft, DType, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordManifest {
    task: Option<usize>,
    frozen: bool,
    momentum: f64,
    stab_eps: f64,
    stride: usize,
    in_channels: usize,
    input_spatial: Option<(usize, usize)>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerManifest {
    shared: RecordManifest,
    records: Vec<RecordManifest>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadManifest {
    task: usize,
    inputs: usize,
    classes: usize,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    architecture: Architecture,
    norm_mode: NormMode,
    layers: Vec<LayerManifest>,
    heads: Vec<HeadManifest>,
    checksums: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format_version: u32,
    config: TrainConfig,
    num_tasks: usize,
    completed_tasks: usize,
    rng: RngState,
    accuracy: AccuracyMatrix,
    probes_first: Option<Vec<LayerMeanProbe>>,
    probes_final: Option<Vec<LayerMeanProbe>>,
    logs: Vec<TrainLog>,
    pretrain_losses: Vec<f64>,
    model: ModelManifest,
    stl: BTreeMap<usize, ModelManifest>,
}

struct TensorWriter<'a> {
    dir: &'a Path,
    checksums: BTreeMap<String, String>,
}

impl TensorWriter<'_> {
    fn put(&mut self, name: String, t: &Tensor) -> Result<()> {
        let bytes = encode_cft(t, DType::F64)?;
        self.checksums.insert(name.clone(), sha256_hex(&bytes));
        std::fs::write(self.dir.join(&name), bytes)?;
        Ok(())
    }
}

struct TensorReader<'a> {
    dir: &'a Path,
    checksums: &'a BTreeMap<String, String>,
}

impl TensorReader<'_> {
    fn get(&self, name: &str) -> Result<Tensor> {
        let expected = self
            .checksums
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint manifest lists no tensor {name}")))?;
        let path = self.dir.join(name);
        let bytes =
            std::fs::read(&path).map_err(|e| Error::Format(format!("missing tensor {}: {e}", path.display())))?;
        if &sha256_hex(&bytes) != expected {
            return Err(Error::Format(format!("checksum mismatch for {}", path.display())));
        }
        decode_cft(&bytes).map(|(t, _)| t).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

fn suffix(task: Option<usize>) -> String {
    task.map_or(String::new(), |t| format!(".task{t}"))
}

fn put_record(
    w: &mut TensorWriter,
    l: usize,
    task: Option<usize>,
    frozen: bool,
    r: &XconvRecord,
) -> Result<RecordManifest> {
    let sfx = suffix(task);
    w.put(format!("block{l}.norm.gamma{sfx}.cft"), &r.bn.gamma)?;
    w.put(format!("block{l}.norm.beta{sfx}.cft"), &r.bn.beta)?;
    w.put(format!("block{l}.norm.running_mean{sfx}.cft"), &r.bn.running_mean)?;
    w.put(format!("block{l}.norm.running_var{sfx}.cft"), &r.bn.running_var)?;
    for (p, m) in r.pre_means.iter().enumerate() {
        w.put(format!("block{l}.norm.pre_mean{sfx}.phase{p}.cft"), m)?;
    }
    Ok(RecordManifest {
        task,
        frozen,
        momentum: r.bn.momentum,
        stab_eps: r.bn.stab_eps,
        stride: r.stride,
        in_channels: r.in_channels(),
        input_spatial: r.input_spatial,
    })
}

fn get_record(rd: &TensorReader, l: usize, m: &RecordManifest) -> Result<XconvRecord> {
    let sfx = suffix(m.task);
    let bn = BatchNormState::from_parts(
        rd.get(&format!("block{l}.norm.gamma{sfx}.cft"))?,
        rd.get(&format!("block{l}.norm.beta{sfx}.cft"))?,
        rd.get(&format!("block{l}.norm.running_mean{sfx}.cft"))?,
        rd.get(&format!("block{l}.norm.running_var{sfx}.cft"))?,
        m.momentum,
        m.stab_eps,
    )?;
    let mut record = XconvRecord::new(bn, m.in_channels, m.stride)?;
    for p in 0..m.stride * m.stride {
        let t = rd.get(&format!("block{l}.norm.pre_mean{sfx}.phase{p}.cft"))?;
        if t.shape() != [m.in_channels] {
            return Err(Error::Format(format!("pre-mean of block {l} phase {p} has shape {:?}", t.shape())));
        }
        record.pre_means[p] = t;
    }
    record.input_spatial = m.input_spatial;
    Ok(record)
}

fn save_model(model: &ContinualModel, dir: &Path) -> Result<ModelManifest> {
    std::fs::create_dir_all(dir)?;
    let mut w = TensorWriter { dir, checksums: BTreeMap::new() };
    let mut layers = Vec::with_capacity(model.blocks.len());
    for (l, block) in model.blocks.iter().enumerate() {
        w.put(format!("block{l}.conv.weight.cft"), &block.conv.weight)?;
        if let Some(b) = &block.conv.bias {
            w.put(format!("block{l}.conv.bias.cft"), b)?;
        }
        let shared = put_record(&mut w, l, None, false, &block.norm.shared)?;
        let bank = &block.norm.bank;
        let records = bank
            .tasks()
            .map(|t| put_record(&mut w, l, Some(t), bank.is_frozen(t), bank.get(t)?))
            .collect::<Result<Vec<_>>>()?;
        layers.push(LayerManifest { shared, records });
    }
    let mut heads = Vec::with_capacity(model.heads.len());
    for (&task, head) in &model.heads {
        w.put(format!("head.weight.task{task}.cft"), &head.weight)?;
        w.put(format!("head.bias.task{task}.cft"), &head.bias)?;
        heads.push(HeadManifest {
            task,
            inputs: head.inputs(),
            classes: head.outputs(),
            frozen: model.frozen_heads.contains(&task),
        });
    }
    Ok(ModelManifest { architecture: model.arch.clone(), norm_mode: model.mode, layers, heads, checksums: w.checksums })
}

fn load_model(m: &ModelManifest, dir: &Path) -> Result<ContinualModel> {
    let rd = TensorReader { dir, checksums: &m.checksums };
    m.architecture.spatial_sizes()?;
    if m.layers.len() != m.architecture.convs.len() {
        return Err(Error::Format(format!(
            "{} layer entries for {} conv blocks",
            m.layers.len(),
            m.architecture.convs.len()
        )));
    }
    let mut blocks = Vec::with_capacity(m.layers.len());
    for (l, (spec, lm)) in m.architecture.convs.iter().zip(&m.layers).enumerate() {
        let bias = if spec.has_bias { Some(rd.get(&format!("block{l}.conv.bias.cft"))?) } else { None };
        let conv = Conv2d::new(*spec, rd.get(&format!("block{l}.conv.weight.cft"))?, bias)?;
        let shared = get_record(&rd, l, &lm.shared)?;
        let mut bank = XconvBnBank::new();
        for rm in &lm.records {
            let task = rm.task.ok_or_else(|| Error::Format(format!("bank record of block {l} without a task id")))?;
            bank.insert(task, get_record(&rd, l, rm)?)?;
            if rm.frozen {
                bank.freeze(task)?;
            }
        }
        blocks.push(Block { conv, norm: NormLayer { shared, bank } });
    }
    let mut model = ContinualModel {
        arch: m.architecture.clone(),
        mode: m.norm_mode,
        blocks,
        heads: BTreeMap::new(),
        frozen_heads: Default::default(),
    };
    for h in &m.heads {
        let head = Linear::from_parts(
            rd.get(&format!("head.weight.task{}.cft", h.task))?,
            rd.get(&format!("head.bias.task{}.cft", h.task))?,
        )?;
        if head.inputs() != h.inputs || head.outputs() != h.classes {
            return Err(Error::Format(format!("head of task {} disagrees with manifest", h.task)));
        }
        model.heads.insert(h.task, head);
        if h.frozen {
            model.frozen_heads.insert(h.task);
        }
    }
    model.recover_all()?;
    Ok(model)
}

fn stl_dir(task: usize) -> String {
    format!("stl_task{task}")
}

/// Writes the full run state to `dir`.
pub fn save_checkpoint(state: &RunState, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let model = save_model(&state.model, dir)?;
    let stl = state
        .stl_models
        .iter()
        .map(|(&t, m)| Ok((t, save_model(m, &dir.join(stl_dir(t)))?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: state.config.clone(),
        num_tasks: state.num_tasks,
        completed_tasks: state.completed(),
        rng: RngState {
            seed: hex::encode(state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        accuracy: state.matrix.clone(),
        probes_first: state.probes_first.clone(),
        probes_final: state.probes_final.clone(),
        logs: state.logs.clone(),
        pretrain_losses: state.pretrain_losses.clone(),
        model,
        stl,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Restores a run saved by [`save_checkpoint`]; recovered means are rebuilt.
pub fn load_checkpoint(dir: &Path) -> Result<RunState> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Format(format!("missing checkpoint manifest {}: {e}", path.display())))?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    if m.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {} (this build reads {CHECKPOINT_FORMAT_VERSION})",
            m.format_version
        )));
    }
    if m.logs.len() != m.completed_tasks || m.accuracy.tasks() != m.num_tasks {
        return Err(Error::Format("checkpoint progress fields disagree".into()));
    }
    let seed: [u8; 32] = hex::decode(&m.rng.seed)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Format("malformed RNG seed".into()))?;
    let word_pos: u128 = m.rng.word_pos.parse().map_err(|_| Error::Format("malformed RNG position".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(m.rng.stream);
    rng.set_word_pos(word_pos);
    let model = load_model(&m.model, dir)?;
    let stl_models = m
        .stl
        .iter()
        .map(|(&t, mm)| Ok((t, load_model(mm, &dir.join(stl_dir(t)))?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(RunState {
        config: m.config,
        num_tasks: m.num_tasks,
        model,
        stl_models,
        matrix: m.accuracy,
        probes_first: m.probes_first,
        probes_final: m.probes_final,
        logs: m.logs,
        pretrain_losses: m.pretrain_losses,
        rng,
    })
}
