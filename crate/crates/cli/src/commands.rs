use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use tpatch_core::config::RunConfig;
use tpatch_core::dataeval::{generate, load_dataset, split_by_class, write_dataset, LabeledClip, SyntheticSpec};
use tpatch_core::model::train::eval_seed;
use tpatch_core::model::{evaluate, gradcam, gradient_suite, log_csv, train, Model};
use tpatch_core::nnkit::{majority_label, Checkpoint};
use tpatch_core::pcseq::{clip_sequence, load_sequence, save_sequence, PointCloudSequence};
use tpatch_core::tpatch::{collapse_report, correspondence_accuracy, extract, Direction};

/// Some gradient check exceeded its tolerance.
#[derive(Debug)]
pub struct GradCheckFailed(pub Vec<String>);

impl std::fmt::Display for GradCheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed: {}", self.0.join(", "))
    }
}

impl std::error::Error for GradCheckFailed {}

pub struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    pub fn setup(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<Self> {
        let mut cfg = match config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        fs::write(out.join("resolved_config.txt"), cfg.render())?;
        Ok(Self {
            cfg,
            out: out.to_path_buf(),
        })
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Clip windows of `model.clip_length` frames cut from one split of the dataset.
    fn split(&self, name: &str) -> Result<Vec<LabeledClip>> {
        let dir = self.cfg.data.dir.join(name);
        let length = self.cfg.model.clip_length;
        let mut clips = Vec::new();
        for c in load_dataset(&dir).with_context(|| format!("loading dataset {}", dir.display()))? {
            for w in clip_sequence(&c.seq, &c.id, length, self.cfg.clip_stride())? {
                let class = w.seq.labels().and_then(majority_label).unwrap_or(c.class);
                clips.push(LabeledClip {
                    id: format!("{}@{}", c.id, w.start),
                    class,
                    seq: w.seq,
                    limb: c.limb.clone(),
                });
            }
        }
        Ok(clips)
    }

    /// The configured input clip, or the first test window.
    fn input(&self) -> Result<PointCloudSequence> {
        if self.cfg.input.as_os_str().is_empty() {
            let test = self.split("test")?;
            let first = test
                .into_iter()
                .next()
                .ok_or_else(|| anyhow!("test split has no clip of {} frames", self.cfg.model.clip_length))?;
            Ok(first.seq)
        } else {
            Ok(load_sequence(&self.cfg.input).with_context(|| format!("loading {}", self.cfg.input.display()))?)
        }
    }

    fn checkpoint_path(&self) -> PathBuf {
        if self.cfg.checkpoint.as_os_str().is_empty() {
            self.out.join("best.ckpt")
        } else {
            self.cfg.checkpoint.clone()
        }
    }

    fn load_model(&self) -> Result<Model<f32>> {
        let path = self.checkpoint_path();
        let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
        Ok(Model::from_checkpoint(self.cfg.model_config(), &ckpt)?)
    }

    pub fn gen(&self) -> Result<()> {
        let clips = generate(&self.cfg.synthetic_spec())?;
        let (train, val, test) = split_by_class(clips, self.cfg.data.train_per_class, self.cfg.data.val_per_class);
        for (name, set) in [("train", &train), ("val", &val), ("test", &test)] {
            write_dataset(self.out.join(name), set)?;
        }
        println!(
            "wrote {} train, {} val, {} test sequences to {}",
            train.len(),
            val.len(),
            test.len(),
            self.out.display()
        );
        Ok(())
    }

    pub fn extract(&self) -> Result<()> {
        let seq = self.input()?;
        let ex = &self.cfg.model.extraction;
        let params = ex.params(&self.cfg.model.levels[0], &seq, self.cfg.seed)?;
        let tps = extract(&seq, &params, ex.variant)?;
        let report = collapse_report(&tps);
        self.write("collapse.csv", report.to_csv())?;

        let mut csv = String::from("patch,direction,frame,query_index,x,y,z\n");
        for (i, p) in tps.patches.iter().enumerate() {
            let dir = match p.direction {
                Direction::Forward => "forward",
                Direction::Reverse => "reverse",
            };
            for (t, (q, idx)) in p.query.iter().zip(&p.query_index).enumerate() {
                let _ = writeln!(csv, "{i},{dir},{t},{idx},{},{},{}", q[0], q[1], q[2]);
            }
        }
        self.write("tpatches.csv", csv)?;

        if seq.correspondence().is_some() {
            let acc = correspondence_accuracy(&seq, ex.backend)?;
            let mut csv = String::from("frame,accuracy\n");
            for (t, a) in acc.iter().enumerate() {
                let _ = writeln!(csv, "{},{a:.6}", t + 1);
            }
            self.write("correspondence.csv", csv)?;
            let mean = acc.iter().sum::<f64>() / acc.len().max(1) as f64;
            println!("nn correspondence accuracy {:.2}%", 100.0 * mean);
        }
        let last = report.frames.last().expect("clips have frames");
        println!(
            "{} patches, jitter sigma {:.5}; final frame: {} distinct queries, coverage {:.3}, {} collapsed pairs",
            tps.len(),
            params.jitter_sigma,
            last.distinct_queries,
            last.coverage_ratio,
            report.collapsed_pairs
        );
        Ok(())
    }

    pub fn train(&self) -> Result<()> {
        let train_set = self.split("train")?;
        let val_set = match self.split("val") {
            Ok(v) => v,
            Err(_) if !self.cfg.data.dir.join("val").exists() => Vec::new(),
            Err(e) => return Err(e),
        };
        let mut model = Model::<f32>::new(self.cfg.model_config())?;
        let mut tc = self.cfg.train_config();
        tc.checkpoint = Some(self.out.join("best.ckpt"));
        tc.log = Some(self.out.join("metrics.csv"));
        println!(
            "training {} parameters on {} clips ({} val)",
            model.param_count(),
            train_set.len(),
            val_set.len()
        );
        let outcome = train(&mut model, &train_set, &val_set, &tc)?;
        self.write("metrics.csv", log_csv(&outcome.logs))?;
        println!("best epoch {} mAP {:.4}", outcome.best_epoch, outcome.best_map);
        Ok(())
    }

    pub fn eval(&self) -> Result<()> {
        let model = self.load_model()?;
        let test = self.split("test")?;
        let ev = evaluate(&model, &test, self.cfg.seed)?;
        self.write("eval.csv", ev.report.to_csv())?;
        let r = &ev.report;
        println!(
            "top1 {:.2} top3 {:.2} macro_recall {:.2} mAP {:.4} on {} clips",
            r.top1,
            r.top3,
            r.macro_recall,
            r.map,
            test.len()
        );
        Ok(())
    }

    pub fn saliency(&self) -> Result<()> {
        let mut model = self.load_model()?;
        let seq = self.input()?;
        let seed = eval_seed(self.cfg.seed, 0);
        let target = match (self.cfg.saliency_target, seq.labels().and_then(majority_label)) {
            (Some(t), _) => t,
            (None, Some(l)) => l as usize,
            (None, None) => {
                let out = model.infer(&seq, seed)?;
                let logits = out.clip(0);
                (0..logits.len())
                    .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
                    .unwrap_or(0)
            }
        };
        let s = gradcam(&mut model, &seq, target, seed)?;
        save_sequence(&seq, self.out.join("saliency.pcsq"))?;
        self.write("saliency.f32", s.to_le_bytes())?;
        println!("saliency for class {target}: max {:.6}", s.max());
        Ok(())
    }

    pub fn gradcheck(&self) -> Result<()> {
        let rows = gradient_suite(self.cfg.seed, self.cfg.gradcheck_per_tensor)?;
        let mut csv = String::from("check,max_rel_error,tolerance,checked,pass\n");
        let mut failed = Vec::new();
        for r in &rows {
            let _ = writeln!(
                csv,
                "{},{:e},{:e},{},{}",
                r.name,
                r.max_error,
                r.tolerance,
                r.checked,
                r.passed()
            );
            println!(
                "{:<20} max relative error {:.3e} (< {:e}) {}",
                r.name,
                r.max_error,
                r.tolerance,
                if r.passed() { "ok" } else { "FAILED" }
            );
            if !r.passed() {
                failed.push(r.name.clone());
            }
        }
        self.write("gradcheck.csv", csv)?;
        if failed.is_empty() {
            Ok(())
        } else {
            Err(GradCheckFailed(failed).into())
        }
    }

    pub fn bench(&self) -> Result<()> {
        let b = &self.cfg.bench;
        let mut model = Model::<f32>::new(self.cfg.model_config())?;
        let (mut levels, mut head) = (0, 0);
        for (stage, n) in model.param_count_by_stage() {
            if stage.starts_with("level") {
                levels += n;
            } else {
                head += n;
            }
        }
        let mut clips = generate(&SyntheticSpec {
            num_classes: 2,
            clips_per_class: b.batch_size.div_ceil(2),
            frames: b.frames,
            points: b.points,
            seed: self.cfg.seed,
            ..Default::default()
        })?;
        clips.truncate(b.batch_size);
        let seqs: Vec<&PointCloudSequence> = clips.iter().map(|c| &c.seq).collect();
        let seeds: Vec<u64> = (0..seqs.len()).map(|i| eval_seed(self.cfg.seed, i)).collect();
        let (mut t_ex, mut t_feat, mut t_head) = (0.0, 0.0, 0.0);
        for _ in 0..b.runs {
            let t = Instant::now();
            let geoms = model.plan_batch(&seqs, &seeds)?;
            t_ex += t.elapsed().as_secs_f64();
            for g in geoms {
                let t = Instant::now();
                let feats = model.infer_features(g)?;
                t_feat += t.elapsed().as_secs_f64();
                let t = Instant::now();
                model.infer_head(feats)?;
                t_head += t.elapsed().as_secs_f64();
            }
        }
        let runs = b.runs.max(1) as f64;
        let per_run = |s: f64| 1000.0 * s / runs;
        let mut csv = String::from("stage,ms,params\n");
        let _ = writeln!(csv, "extraction,{:.3},0", per_run(t_ex));
        let _ = writeln!(csv, "features,{:.3},{levels}", per_run(t_feat));
        let _ = writeln!(csv, "classifier,{:.3},{head}", per_run(t_head));
        let _ = writeln!(csv, "total,{:.3},{}", per_run(t_ex + t_feat + t_head), levels + head);
        self.write("bench.csv", &csv)?;
        print!("{csv}");
        Ok(())
    }
}
