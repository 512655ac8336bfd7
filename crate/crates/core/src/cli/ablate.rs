use std::collections::BTreeMap;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::bench::BenchData;
use super::config::RunConfig;
use super::run::{evaluate_model, train};
use crate::error::{Error, Result};
use crate::eval::ClassFilter;
use crate::meta_train::{MetaScope, Strategy, TrainState};
use crate::prn::FusionMode;

/// Where meta-learning attends: pooled image features or RoI features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    #[serde(alias = "full_image")]
    FullImage,
    #[serde(alias = "RoI")]
    Roi,
}

/// Values per axis; a cell takes one value of every given axis.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Axes {
    #[serde(default, alias = "meta-loss", skip_serializing_if = "Option::is_none")]
    pub meta_loss: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<Vec<FusionMode>>,
    #[serde(default, alias = "share-trunk", alias = "share", skip_serializing_if = "Option::is_none")]
    pub share_trunk: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<Vec<MetaScope>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Vec<Strategy>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<Vec<Level>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct AblationMatrix {
    pub axes: Axes,
    /// Shot and training seeds each cell is averaged over; defaults to the run seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Strategy of cells without a strategy or level axis.
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
}

impl AblationMatrix {
    /// JSON Schema of the matrix file, as published under `docs/`.
    pub fn schema() -> serde_json::Value {
        schemars::schema_for!(AblationMatrix).to_value()
    }
}

fn default_strategy() -> Strategy {
    Strategy::MetaRcnn
}

type Setter = Box<dyn Fn(&mut Cell)>;

struct Cell {
    config: crate::meta_train::TrainConfig,
    strategy: Strategy,
}

impl Axes {
    /// `(axis, [(label, setter)])` in a fixed axis order.
    fn expand(&self) -> Result<Vec<(&'static str, Vec<(String, Setter)>)>> {
        if self.strategy.is_some() && self.level.is_some() {
            return Err(Error::Config("axes strategy and level both set the strategy".into()));
        }
        fn axis<T: Copy + Serialize + 'static>(
            out: &mut Vec<(&'static str, Vec<(String, Setter)>)>,
            name: &'static str,
            values: &Option<Vec<T>>,
            set: fn(&mut Cell, T),
        ) -> Result<()> {
            let Some(vs) = values else { return Ok(()) };
            if vs.is_empty() {
                return Err(Error::Config(format!("axis {name} lists no values")));
            }
            let cells = vs
                .iter()
                .map(|&v| {
                    let label = match serde_json::to_value(v)? {
                        serde_json::Value::String(s) => s,
                        other => other.to_string(),
                    };
                    Ok((label, Box::new(move |c: &mut Cell| set(c, v)) as Setter))
                })
                .collect::<Result<_>>()?;
            out.push((name, cells));
            Ok(())
        }
        let mut out = Vec::new();
        axis(&mut out, "strategy", &self.strategy, |c, v| c.strategy = v)?;
        axis(&mut out, "level", &self.level, |c, v| {
            c.strategy = match v {
                Level::FullImage => Strategy::FullImageMeta,
                Level::Roi => Strategy::MetaRcnn,
            }
        })?;
        axis(&mut out, "meta_loss", &self.meta_loss, |c, v| c.config.meta_loss = v)?;
        axis(&mut out, "fusion", &self.fusion, |c, v| c.config.detector.fusion = v)?;
        axis(&mut out, "share_trunk", &self.share_trunk, |c, v| c.config.detector.share_trunk = v)?;
        axis(&mut out, "scope", &self.scope, |c, v| c.config.scope = v)?;
        axis(&mut out, "k", &self.k, |c, v| c.config.k = v)?;
        axis(&mut out, "mask", &self.mask, |c, v| c.config.detector.mask = v)?;
        if out.is_empty() {
            return Err(Error::Config("the ablation matrix has no axes".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: BTreeMap<String, String>,
    pub strategy: Strategy,
    pub map_base: f64,
    pub map_novel: f64,
    /// Novel mAP minus that of the first row.
    pub delta_novel: f64,
    pub per_seed_novel: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axes: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut header: Vec<String> = self.axes.clone();
        header.extend(["mAP base", "mAP novel", "Δ novel"].map(String::from));
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut v: Vec<String> = self.axes.iter().map(|a| r.cell[a].clone()).collect();
                v.push(format!("{:.4}", r.map_base));
                v.push(format!("{:.4}", r.map_novel));
                v.push(format!("{:+.4}", r.delta_novel));
                v
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| rows.iter().map(|r| r[i].chars().count()).chain([header[i].chars().count()]).max().unwrap_or(0))
            .collect();
        let fmt = |cells: &[String]| {
            let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            parts.join("  ") + "\n"
        };
        let mut out = fmt(&header);
        for r in &rows {
            out.push_str(&fmt(r));
        }
        out
    }
}

/// Trains and evaluates every cell on every seed. Registries are resampled
/// per seed from the loaded images.
pub fn run_ablation(cfg: &RunConfig, matrix: &AblationMatrix, bench: &BenchData) -> Result<AblationTable> {
    let axes = matrix.axes.expand()?;
    let seeds = if matrix.seeds.is_empty() { vec![cfg.seed] } else { matrix.seeds.clone() };
    let mut ks: Vec<usize> = matrix.axes.k.clone().unwrap_or_default();
    ks.push(cfg.train.k);
    ks.sort_unstable();
    ks.dedup();
    let benches = seeds
        .iter()
        .map(|&s| BenchData::with_registries(bench.train.clone(), bench.test.clone(), bench.split.clone(), &ks, s))
        .collect::<Result<Vec<_>>>()?;

    // cartesian product, first axis varying slowest
    let mut combos: Vec<Vec<usize>> = vec![vec![]];
    for (_, values) in &axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                (0..values.len()).map(move |i| {
                    let mut c = c.clone();
                    c.push(i);
                    c
                })
            })
            .collect();
    }
    let mut rows: Vec<AblationRow> = Vec::new();
    for combo in combos {
        let mut cell = Cell {
            config: cfg.train.clone(),
            strategy: matrix.strategy,
        };
        let mut labels = BTreeMap::new();
        for ((name, values), &i) in axes.iter().zip(&combo) {
            (values[i].1)(&mut cell);
            labels.insert(name.to_string(), values[i].0.clone());
        }
        let (mut base, mut novel) = (Vec::new(), Vec::new());
        for (&seed, b) in seeds.iter().zip(&benches) {
            let tc = crate::meta_train::TrainConfig { seed, ..cell.config.clone() };
            tc.check_data(&b.train.manifest())?;
            let mut state = TrainState::new(tc, cell.strategy, b.split.num_classes())?;
            log::info!("ablation cell {labels:?} seed {seed}");
            train(&mut state, b, None, &mut |_| Ok(()))?;
            let k = state.config.k;
            let ev = evaluate_model(
                &state.model,
                cell.strategy,
                state.config.meta_mask_channel,
                b,
                k,
                ClassFilter::All,
                &cfg.eval.inference,
                serde_json::Value::Null,
            )?;
            base.push(ev.report.map_base);
            novel.push(ev.report.map_novel);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let map_novel = mean(&novel);
        let delta_novel = rows.first().map_or(0.0, |r| map_novel - r.map_novel);
        rows.push(AblationRow {
            cell: labels,
            strategy: cell.strategy,
            map_base: mean(&base),
            map_novel,
            delta_novel,
            per_seed_novel: novel,
        });
    }
    Ok(AblationTable {
        axes: axes.iter().map(|(n, _)| n.to_string()).collect(),
        seeds,
        rows,
    })
}
