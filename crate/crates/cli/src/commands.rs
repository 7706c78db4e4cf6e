use std::collections::{BTreeMap, HashMap};
use std::path::{Component, Path, PathBuf};

use firmil::bagstore::{
    generate_synthetic, read_bag, stratified_split, write_bag, Bag, DatasetManifest, FirLabel, ManifestEntry, Split,
    SynthSpec, N_CLASSES,
};
use firmil::embanalysis::{
    adjusted_rand_index, kmeans, knn_balanced_accuracy, pca_fit, render_scatter, standardize, tsne,
    write_coordinates_csv, TsneConfig,
};
use firmil::ensemble::{candidates_from_report, select_topk};
use firmil::heatmap::{render_attention, top_attention_patches, HeatmapSpec};
use firmil::linalg::Matrix;
use firmil::metrics::MetricReport;
use firmil::milnet::{
    class_weights, evaluate, train_epoch, write_checkpoint, Checkpoint, CheckpointHeader, MilParams,
};
use firmil::optim::{Hyperparams, OptState, SearchSpace};
use firmil::pbt::{random_search, run_pbt, PbtConfig, TrainingData};
use firmil::tiler::{extract_patches, segment_tissue, PatchGrid, RasterImage, ToyExtractor};
use firmil::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::args::*;
use crate::run::{base_dir, hash_inputs, write_json, Dataset, Model, RunManifest};

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::File { path: dir.into(), source: Box::new(e.into()) })
}

struct Ctx<'a> {
    cli: &'a Cli,
}

impl Ctx<'_> {
    fn record<C: Serialize>(&self, out: &Path, config: &C, inputs: &[PathBuf]) -> Result<()> {
        let manifest = RunManifest {
            tool: "firmil",
            version: env!("CARGO_PKG_VERSION"),
            command: self.cli.command.name(),
            seed: self.cli.seed,
            threads: self.cli.threads,
            config,
            inputs: hash_inputs(inputs.iter().map(PathBuf::as_path))?,
        };
        write_json(&out.join("run.json"), &manifest)
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let ctx = Ctx { cli };
    match &cli.command {
        Command::Tile(a) => tile(&ctx, a),
        Command::Embed(a) => embed(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
        Command::Split(a) => split(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Pbt(a) => pbt(&ctx, a),
        Command::Ensemble(a) => ensemble(&ctx, a),
        Command::Predict(a) => predict_cmd(&ctx, a),
        Command::Heatmap(a) => heatmap(&ctx, a),
        Command::Analyze(a) => analyze(&ctx, a),
        Command::Evaluate(a) => evaluate_cmd(&ctx, a),
    }
}

fn tile(ctx: &Ctx, a: &TileArgs) -> Result<()> {
    let image = RasterImage::open(&a.image)?;
    let mask = segment_tissue(&image, a.downsample)?;
    let mut grid = extract_patches(&image, &mask, a.patch, a.min_tissue)?;
    grid.magnification_label = a.magnification.clone();
    create_dir(&a.out)?;
    grid.save(a.out.join("grid.json"))?;
    mask.to_image().save_png(a.out.join("mask.png"))?;
    if a.save_patches {
        let dir = a.out.join("patches");
        create_dir(&dir)?;
        for &[x, y] in &grid.coords {
            image.crop(x, y, a.patch)?.save_png(dir.join(format!("patch_{x}_{y}.png")))?;
        }
    }
    ctx.record(&a.out, a, std::slice::from_ref(&a.image))?;
    println!("{} patches, tissue fraction {:.4}", grid.len(), mask.tissue_fraction());
    Ok(())
}

fn embed(ctx: &Ctx, a: &EmbedArgs) -> Result<()> {
    let image = RasterImage::open(&a.image)?;
    let grid = PatchGrid::load(&a.grid)?;
    let extractor = ToyExtractor::new(a.dim, ctx.cli.seed)?;
    let mut embeddings = Vec::with_capacity(grid.len() * a.dim);
    for &[x, y] in &grid.coords {
        embeddings.extend(extractor.embed(&image.crop(x, y, grid.patch_size)?).into_iter().map(|v| v as f32));
    }
    let slide_id = match &a.slide_id {
        Some(id) => id.clone(),
        None => a.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "slide".into()),
    };
    let bag = Bag::new(slide_id.clone(), a.dim, grid.coords.clone(), embeddings)?;
    create_dir(&a.out)?;
    let path = a.out.join(format!("{slide_id}.milb"));
    write_bag(&bag, &path)?;
    ctx.record(&a.out, a, &[a.image.clone(), a.grid.clone()])?;
    println!("{}: {} patches x {}", path.display(), bag.n_patches(), bag.dim);
    Ok(())
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    if a.classes != N_CLASSES {
        return Err(invalid(format!("--classes must be {N_CLASSES}; the label set is FIR0, FIR1, FIR2/3")));
    }
    let spec = SynthSpec {
        n_bags_per_class: a.bags,
        dim: a.dim,
        patches_per_bag: (a.min_patches, a.max_patches),
        signal_fraction: a.signal_fraction,
        class_center_separation: a.separation,
        noise_sigma: a.noise,
        seed: ctx.cli.seed,
    };
    let data = generate_synthetic(&spec)?;
    create_dir(&a.out)?;
    let manifest = data.write(&a.out)?;
    ctx.record(&a.out, a, &[])?;
    let count = |s| manifest.entries_in(s).count();
    println!(
        "{} bags (train {}, val {}, test {}) in {}",
        manifest.entries.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        a.out.join("manifest.json").display()
    );
    Ok(())
}

fn read_labels(path: &Path) -> Result<HashMap<String, FirLabel>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::File { path: path.into(), source: Box::new(e.into()) })?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 || (i == 0 && fields[0] == "slide_id") || line.trim().is_empty() {
            continue;
        }
        let code: usize = fields[1].parse().map_err(|_| invalid(format!("{}:{}: bad label", path.display(), i + 1)))?;
        out.insert(fields[0].to_string(), FirLabel::from_index(code)?);
    }
    Ok(out)
}

fn split(ctx: &Ctx, a: &SplitArgs) -> Result<()> {
    let fractions = [a.train, a.val, a.test];
    let (mut manifest, input, out) = match (&a.bags, &a.labels) {
        (Some(dir), Some(labels_path)) => {
            let labels = read_labels(labels_path)?;
            let out = a.out.clone().unwrap_or_else(|| PathBuf::from("manifest.json"));
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "milb"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(invalid(format!("no .milb files in {}", dir.display())));
            }
            let mut dim = None;
            let mut entries = Vec::new();
            for f in &files {
                let bag = read_bag(f)?;
                let expected = *dim.get_or_insert(bag.dim);
                if bag.dim != expected {
                    return Err(Error::File {
                        path: f.clone(),
                        source: Box::new(Error::DimensionMismatch { expected, found: bag.dim }),
                    });
                }
                let label = *labels.get(&bag.slide_id).ok_or_else(|| invalid(format!("no label for {}", bag.slide_id)))?;
                entries.push(ManifestEntry { bag: relative_to(f, base_dir(&out))?, label, split: Split::Train });
            }
            let m = DatasetManifest { extractor_id: a.extractor_id.clone(), dim: dim.unwrap_or(0) as u32, entries };
            (m, vec![labels_path.clone()], out)
        }
        _ => {
            let path = a.manifest.clone().unwrap_or_else(|| PathBuf::from("manifest.json"));
            let out = a.out.clone().unwrap_or_else(|| path.clone());
            (DatasetManifest::load(&path)?, vec![path], out)
        }
    };
    let labels: Vec<FirLabel> = manifest.entries.iter().map(|e| e.label).collect();
    for (entry, s) in manifest.entries.iter_mut().zip(stratified_split(&labels, fractions, ctx.cli.seed)?) {
        entry.split = s;
    }
    manifest.validate()?;
    manifest.save(&out)?;
    let dir = base_dir(&out).to_path_buf();
    let dir = if dir.as_os_str().is_empty() { PathBuf::from(".") } else { dir };
    ctx.record(&dir, a, &input)?;
    println!("{} bags written to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn epoch_seeds(seed: u64, epochs: usize) -> (u64, Vec<u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = rng.random();
    (init, (0..epochs).map(|_| rng.random()).collect())
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: usize,
    lr: f64,
    train_loss: f64,
    val_balanced_accuracy: f64,
    val_auroc: Option<f64>,
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let data = Dataset::open(&a.manifest)?;
    let (train_bags, val_bags) = (data.labeled(Split::Train)?, data.labeled(Split::Val)?);
    if train_bags.is_empty() || val_bags.is_empty() {
        return Err(invalid("the manifest needs train and val bags"));
    }
    let arch = a.arch.arch(data.manifest.dim as usize);
    let hp = Hyperparams {
        algorithm: a.optimizer,
        learning_rate: a.lr,
        lr_decay: a.lr_decay,
        momentum: a.momentum,
        ema_enabled: a.ema,
        ema_momentum: a.ema_momentum,
        ..Hyperparams::default()
    };
    hp.validate()?;
    let (init_seed, seeds) = epoch_seeds(ctx.cli.seed, a.epochs);
    let mut params = MilParams::init(&arch, init_seed)?;
    let mut state = OptState::new(&params, &hp);
    let weights = class_weights(&train_bags.iter().map(|b| b.label).collect::<Vec<_>>(), arch.n_classes);
    create_dir(&a.out)?;
    let mut history = csv_writer(&a.out.join("history.csv"))?;
    let mut best: Option<f64> = None;
    for (epoch, seed) in seeds.into_iter().enumerate() {
        let lr = state.lr;
        let loss = train_epoch(&mut params, &mut state, &train_bags, &hp, &weights, seed)?;
        state.decay_lr(&hp);
        let eval_params = state.eval_params(&params);
        let report = evaluate(eval_params, &val_bags)?.report;
        log::info!("epoch {}: loss {loss:.4}, val balanced accuracy {:.4}", epoch + 1, report.balanced_accuracy);
        history.serialize(HistoryRow {
            epoch: epoch + 1,
            lr,
            train_loss: loss,
            val_balanced_accuracy: report.balanced_accuracy,
            val_auroc: report.macro_auroc,
        })?;
        if best.is_none_or(|b| report.balanced_accuracy > b) {
            best = Some(report.balanced_accuracy);
            let ckpt = Checkpoint {
                header: CheckpointHeader {
                    arch: arch.clone(),
                    hyperparams: Some(hp.clone()),
                    epoch: epoch as u32 + 1,
                    val_balanced_accuracy: Some(report.balanced_accuracy),
                    val_auroc: report.macro_auroc,
                    member_id: None,
                },
                params: eval_params.clone(),
            };
            write_checkpoint(&ckpt, a.out.join("model.milc"))?;
        }
    }
    history.flush()?;
    ctx.record(&a.out, a, &data.input_paths())?;
    println!("best val balanced accuracy {:.4}", best.unwrap_or(0.0));
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::File { path: path.into(), source: Box::new(e.into()) })?;
    Ok(csv::Writer::from_writer(file))
}

fn pbt(ctx: &Ctx, a: &PbtArgs) -> Result<()> {
    let data = Dataset::open(&a.manifest)?;
    let training = TrainingData { train: data.labeled(Split::Train)?, val: data.labeled(Split::Val)? };
    let arch = a.arch.arch(data.manifest.dim as usize);
    let config = PbtConfig {
        population_size: a.population,
        min_epochs_before_exploit: a.min_epochs,
        exploit_interval_epochs: a.interval,
        total_epochs: a.epochs,
        truncation_fraction: a.truncation,
        resample_probability: a.resample_prob,
        seed: ctx.cli.seed,
        ..PbtConfig::default()
    };
    let space = SearchSpace::default();
    let outcome = if a.random_search {
        random_search(&config, &arch, &space, &training, Some(&a.out))?
    } else {
        run_pbt(&config, &arch, &space, &training, Some(&a.out))?
    };
    ctx.record(&a.out, a, &data.input_paths())?;
    if let Some(best) = outcome.report.best() {
        println!(
            "best member {} at epoch {}: val balanced accuracy {:.4}",
            best.member_id, best.best_epoch, best.best_balanced_accuracy
        );
    }
    Ok(())
}

/// `target` expressed relative to directory `base`.
fn relative_to(target: &Path, base: &Path) -> Result<PathBuf> {
    let abs = |p: &Path| -> Result<PathBuf> {
        let p = if p.as_os_str().is_empty() { Path::new(".") } else { p };
        Ok(std::fs::canonicalize(p)?)
    };
    let (t, b) = (abs(target)?, abs(base)?);
    let (tc, bc): (Vec<Component>, Vec<Component>) = (t.components().collect(), b.components().collect());
    let common = tc.iter().zip(&bc).take_while(|(x, y)| x == y).count();
    let mut out: PathBuf = bc[common..].iter().map(|_| Component::ParentDir).collect();
    out.extend(&tc[common..]);
    Ok(out)
}

#[derive(Serialize)]
struct SelectionSummary {
    k: usize,
    val_balanced_accuracy: f64,
    curve: Vec<f64>,
    members: Vec<PathBuf>,
}

fn ensemble(ctx: &Ctx, a: &EnsembleArgs) -> Result<()> {
    let report = firmil::pbt::PbtReport::load(&a.pbt)?;
    let candidates = candidates_from_report(&report, &a.pbt)?;
    let data = Dataset::open(&a.manifest)?;
    let val = data.labeled(Split::Val)?;
    let mut selection = select_topk(&candidates, a.k_max, &val)?;
    create_dir(&a.out)?;
    for m in &mut selection.ensemble.members {
        if let Some(p) = &m.checkpoint {
            m.checkpoint = Some(relative_to(p, &a.out)?);
        }
    }
    let manifest = selection.ensemble.to_manifest()?;
    manifest.save(a.out.join("ensemble.json"))?;
    write_json(
        &a.out.join("selection.json"),
        &SelectionSummary {
            k: selection.k,
            val_balanced_accuracy: selection.val_balanced_accuracy,
            curve: selection.curve.clone(),
            members: manifest.members.iter().map(|m| m.checkpoint.clone()).collect(),
        },
    )?;
    let mut inputs = vec![a.pbt.join("summary.json")];
    inputs.extend(data.input_paths());
    ctx.record(&a.out, a, &inputs)?;
    println!("k = {}: val balanced accuracy {:.4}", selection.k, selection.val_balanced_accuracy);
    Ok(())
}

#[derive(Serialize)]
struct Prediction<'a> {
    slide_id: &'a str,
    predicted: usize,
    predicted_label: String,
    probabilities: &'a [f64],
    scores: &'a [f64],
}

fn predict_cmd(ctx: &Ctx, a: &PredictArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let bag = read_bag(&a.bag)?;
    model.check_dim(bag.dim)?;
    let r = model.predict(&bag.to_matrix())?;
    create_dir(&a.out)?;
    let pred = Prediction {
        slide_id: &bag.slide_id,
        predicted: r.predicted,
        predicted_label: FirLabel::from_index(r.predicted)?.to_string(),
        probabilities: &r.probabilities,
        scores: &r.scores,
    };
    write_json(&a.out.join("prediction.json"), &pred)?;
    let mut w = csv_writer(&a.out.join("attention.csv"))?;
    let mut header = vec!["x".to_string(), "y".to_string()];
    header.extend((0..r.attention.len()).map(|c| format!("attention_{c}")));
    w.write_record(&header)?;
    for (i, &[x, y]) in bag.coords.iter().enumerate() {
        let mut row = vec![x.to_string(), y.to_string()];
        row.extend(r.attention.iter().map(|att| att[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    ctx.record(&a.out, a, &[a.model.clone(), a.bag.clone()])?;
    println!("{}", serde_json::to_string(&pred)?);
    Ok(())
}

fn heatmap(ctx: &Ctx, a: &HeatmapArgs) -> Result<()> {
    let image = RasterImage::open(&a.image)?;
    let grid = PatchGrid::load(&a.grid)?;
    let bag = read_bag(&a.bag)?;
    if bag.coords != grid.coords {
        return Err(invalid("bag coordinates do not match the patch grid"));
    }
    let model = Model::load(&a.model)?;
    model.check_dim(bag.dim)?;
    let attn = model.predict(&bag.to_matrix())?;
    let spec = HeatmapSpec { scale: a.scale, opacity: a.opacity, class: a.class };
    create_dir(&a.out)?;
    render_attention(&image, &grid, &attn, &spec)?.save_png(a.out.join("heatmap.png"))?;
    let top = top_attention_patches(&image, &grid, &attn, a.class, a.top_k.min(grid.len()))?;
    for t in &top {
        t.crop.save_png(a.out.join(format!("top_{:02}.png", t.meta.rank)))?;
    }
    write_json(&a.out.join("top.json"), &top.iter().map(|t| &t.meta).collect::<Vec<_>>())?;
    ctx.record(&a.out, a, &[a.image.clone(), a.grid.clone(), a.bag.clone(), a.model.clone()])?;
    println!("predicted {} ({} patches)", FirLabel::from_index(attn.predicted)?, grid.len());
    Ok(())
}

#[derive(Serialize)]
struct AnalysisSummary {
    n_points: usize,
    dim: usize,
    pca_components: usize,
    pca_explained_variance: Vec<f64>,
    kmeans_clusters: usize,
    kmeans_inertia: f64,
    kmeans_adjusted_rand_index: f64,
    knn_k: usize,
    knn_balanced_accuracy: Option<f64>,
    tsne_kl_divergence: Option<f64>,
}

fn read_patch_labels(path: &Path) -> Result<HashMap<(String, u32, u32), usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::File { path: path.into(), source: Box::new(e.into()) })?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() < 4 || (i == 0 && f[0] == "slide_id") {
            continue;
        }
        let bad = || invalid(format!("{}:{}: malformed row", path.display(), i + 1));
        let (x, y, label) =
            (f[1].parse().map_err(|_| bad())?, f[2].parse().map_err(|_| bad())?, f[3].parse().map_err(|_| bad())?);
        out.insert((f[0].to_string(), x, y), label);
    }
    Ok(out)
}

fn analyze(ctx: &Ctx, a: &AnalyzeArgs) -> Result<()> {
    let data = Dataset::open(&a.manifest)?;
    let patch_labels = a.patch_labels.as_deref().map(read_patch_labels).transpose()?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for entry in &data.manifest.entries {
        let bag = read_bag(data.bag_path(&entry.bag))?;
        for (i, &[x, y]) in bag.coords.iter().enumerate() {
            let label = match &patch_labels {
                Some(map) => match map.get(&(bag.slide_id.clone(), x, y)) {
                    Some(&l) => l,
                    None => continue,
                },
                None => entry.label.index(),
            };
            rows.push(bag.embedding(i).iter().map(|&v| v as f64).collect::<Vec<_>>());
            labels.push(label);
            ids.push(format!("{}:{x}:{y}", bag.slide_id));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cli.seed);
    let mut keep: Vec<usize> = (0..rows.len()).collect();
    if keep.len() > a.max_points {
        keep.shuffle(&mut rng);
        keep.truncate(a.max_points);
        keep.sort_unstable();
    }
    if keep.len() < 4 {
        return Err(invalid(format!("only {} labelled patches available", keep.len())));
    }
    let x = standardize(&Matrix::from_rows(&keep.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>()));
    let labels: Vec<usize> = keep.iter().map(|&i| labels[i]).collect();
    let ids: Vec<String> = keep.iter().map(|&i| ids[i].clone()).collect();
    let n_comp = a.pca.min(x.rows).min(x.cols).max(1);
    let pca = pca_fit(&x, n_comp)?;
    let z = pca.project(&x)?;
    create_dir(&a.out)?;
    if z.cols >= 2 {
        write_coordinates_csv(csv_file(&a.out.join("pca.csv"))?, &ids, &z, &labels)?;
        render_scatter(&z, &labels, 512)?.save_png(a.out.join("pca.png"))?;
    }

    let km = kmeans(&z, a.clusters.min(z.rows), ctx.cli.seed, 300)?;
    let ari = adjusted_rand_index(&labels, &km.assignments)?;
    let mut w = csv_writer(&a.out.join("clusters.csv"))?;
    w.write_record(["id", "cluster", "label"])?;
    for ((id, c), l) in ids.iter().zip(&km.assignments).zip(&labels) {
        w.write_record([id.clone(), c.to_string(), l.to_string()])?;
    }
    w.flush()?;

    let (train_idx, test_idx) = holdout_split(&labels, a.holdout, &mut rng);
    let knn = if train_idx.is_empty() || test_idx.is_empty() {
        log::warn!("holdout left an empty side; KNN skipped");
        None
    } else {
        let pick = |idx: &[usize]| Matrix::from_rows(&idx.iter().map(|&i| z.row(i).to_vec()).collect::<Vec<_>>());
        let lab = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
        Some(knn_balanced_accuracy(&pick(&train_idx), &lab(&train_idx), &pick(&test_idx), &lab(&test_idx), a.knn)?)
    };

    let tsne_kl = if a.no_tsne {
        None
    } else {
        let cfg = TsneConfig { perplexity: a.perplexity, iterations: a.tsne_iters, seed: ctx.cli.seed, ..TsneConfig::default() };
        let r = tsne(&z, &cfg)?;
        write_coordinates_csv(csv_file(&a.out.join("tsne.csv"))?, &ids, &r.embedding, &labels)?;
        render_scatter(&r.embedding, &labels, 512)?.save_png(a.out.join("tsne.png"))?;
        Some(r.kl_divergence)
    };
    let summary = AnalysisSummary {
        n_points: z.rows,
        dim: x.cols,
        pca_components: n_comp,
        pca_explained_variance: pca.explained_variance.clone(),
        kmeans_clusters: km.centers.rows,
        kmeans_inertia: km.inertia,
        kmeans_adjusted_rand_index: ari,
        knn_k: a.knn,
        knn_balanced_accuracy: knn,
        tsne_kl_divergence: tsne_kl,
    };
    write_json(&a.out.join("analysis.json"), &summary)?;
    let mut inputs = data.input_paths();
    inputs.extend(a.patch_labels.iter().cloned());
    ctx.record(&a.out, a, &inputs)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn csv_file(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::File { path: path.into(), source: Box::new(e.into()) })
}

/// Per-class seeded holdout: `ceil(fraction · n_c)` points of each class go
/// to the test side, keeping at least one on the train side.
fn holdout_split(labels: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut idx) in by_class {
        idx.shuffle(rng);
        let n_test = ((fraction * idx.len() as f64).ceil() as usize).min(idx.len().saturating_sub(1));
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn evaluate_cmd(ctx: &Ctx, a: &EvaluateArgs) -> Result<()> {
    let data = Dataset::open(&a.manifest)?;
    let model = Model::load(&a.model)?;
    model.check_dim(data.manifest.dim as usize)?;
    let bags = data.labeled(a.split)?;
    if bags.is_empty() {
        return Err(invalid(format!("split {:?} is empty", a.split)));
    }
    let probabilities = bags.iter().map(|b| model.predict(&b.x).map(|r| r.probabilities)).collect::<Result<Vec<_>>>()?;
    let truth: Vec<usize> = bags.iter().map(|b| b.label.index()).collect();
    let report = MetricReport::from_probabilities(&probabilities, &truth, N_CLASSES)?;
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(&out.join("metrics.json"), &report)?;
        report.confusion.write_csv(csv_file(&out.join("confusion.csv"))?)?;
        let mut inputs = vec![a.model.clone()];
        inputs.extend(data.input_paths());
        ctx.record(out, a, &inputs)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
