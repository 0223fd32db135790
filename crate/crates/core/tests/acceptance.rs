//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each, and exits non-zero if any failed.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use echosynth::data::phantom::{phantom, write_fixture_tree};
use echosynth::data::{
    ingest, mix_real_synthetic, read_manifest, split_patients, write_records, BitDepth, DatasetManifest, GrayImage,
    PatientRecord, Provenance, RecordDescriptor, SplitSpec,
};
use echosynth::diffusion::{ddpm_sample, NoiseSchedule, ScheduleKind, ScheduleMeta};
use echosynth::downstream::{linear_probe, Backbone, ConvBackbone, ProbeConfig, SegConfig};
use echosynth::experiment::{
    cmd_downstream_seg, cmd_evaluate, cmd_report, cmd_synthesize, cmd_train, EvalArgs, RegimeArgs, SegArgs,
    SynthArgs, TrainArgs,
};
use echosynth::metrics::{
    average_surface_distance, dice, fid, hausdorff, kid, FeatureSet, KidParams, Mask,
};
use echosynth::models::text::HASHED_WORDS;
use echosynth::models::{presets, BundleSpec, CodecSpec, DenoiserSpec, GenerationMode, ModelBundle, TextEncoderSpec};
use echosynth::nn::Graph;
use echosynth::prompt::{render_abstract, render_textual, ConceptLexicon, ConceptSlot, ViewPhase};
use echosynth::tensor::Tensor;
use echosynth::training::{
    ddpm_loss, ldm_loss, loss_graph, train, TrainConfig, TrainData, TrainSample, CHECKPOINT_DIR,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn fixture_records(patients: std::ops::RangeInclusive<u64>, size: usize) -> Vec<PatientRecord> {
    patients
        .flat_map(|p| {
            ViewPhase::all().into_iter().map(move |vp| {
                let (image, label) = phantom(p, vp, size);
                PatientRecord {
                    patient_id: format!("patient{p:04}"),
                    view_phase: vp,
                    image,
                    label_map: Some(label),
                    provenance: Provenance::Real,
                    source_prompt: None,
                }
            })
        })
        .collect()
}

// 1
fn schedule_correctness() -> Outcome {
    let mut r = rng(1);
    for _ in 0..100 {
        let steps = r.random_range(1..=1000);
        let lo: f64 = r.random_range(1e-5..0.05);
        let hi = lo + r.random_range(0.0..0.3);
        let s = NoiseSchedule::new(steps, lo, hi, ScheduleKind::Linear).map_err(e2s)?;
        let mut prod = 1.0;
        for t in 1..=steps {
            let a = 1.0 - s.beta(t).map_err(e2s)?;
            prod *= a;
            ensure(s.alpha(t).map_err(e2s)? == a, || format!("α_{t} differs from 1 − β_{t}"))?;
            ensure(s.alpha_bar(t).map_err(e2s)? == prod, || format!("ᾱ_{t} is not the running product"))?;
        }
        ensure(s.alpha_bars().windows(2).all(|w| w[1] < w[0]), || format!("ᾱ not decreasing for T={steps}"))?;
    }
    let two = NoiseSchedule::new(2, 0.5, 0.5, ScheduleKind::Linear).map_err(e2s)?;
    ensure(two.alpha_bars() == [0.5, 0.25], || format!("hand case gave {:?}", two.alpha_bars()))?;
    Ok("100 random schedules, hand case [0.5, 0.25]".into())
}

/// Exact noise for a dataset holding the single point `x0`.
fn point_oracle(x0: &Tensor, s: &NoiseSchedule) -> impl Fn(&Tensor, usize) -> echosynth::error::Result<Tensor> {
    let x0 = x0.clone();
    let s = s.clone();
    move |x: &Tensor, t: usize| {
        let ab = s.alpha_bar(t)?;
        x.lin_comb(1.0 / (1.0 - ab).sqrt(), &x0, -ab.sqrt() / (1.0 - ab).sqrt())
    }
}

// 2
fn diffusion_round_trip() -> Outcome {
    let s = NoiseSchedule::linear_default(1000).map_err(e2s)?;
    let x0 = Tensor::randn(&[2, 1, 4, 4], &mut rng(2));
    let eps = Tensor::randn(&[2, 1, 4, 4], &mut rng(3));
    let xt = s.q_sample(&x0, 1, &eps).map_err(e2s)?;
    let back = s.reverse_step(&xt, 1, &eps, &Tensor::zeros(&[2, 1, 4, 4])).map_err(e2s)?;
    let d1 = back.l2_distance(&x0).map_err(e2s)?;
    ensure(d1 < 1e-5, || format!("t=1 reverse step error {d1:e}"))?;
    let point = Tensor::new(&[1, 1, 2, 2], vec![0.5, -0.25, 1.0, 0.0]).map_err(e2s)?;
    let model = point_oracle(&point, &s);
    let out = ddpm_sample(&model, &[1, 1, 2, 2], &s, 7).map_err(e2s)?;
    let d2 = out.l2_distance(&point).map_err(e2s)?;
    ensure(d2 < 1e-2, || format!("sampling ended {d2:e} from the point"))?;
    Ok(format!("t=1 error {d1:.1e}, sampled point error {d2:.1e}"))
}

fn jitter(b: &mut ModelBundle, prefix: &str, seed: u64) {
    let ids: Vec<_> = b.store.ids_with_prefix(prefix).collect();
    let mut r = rng(seed);
    for id in ids {
        let noise = Tensor::randn(b.store.value(id).shape(), &mut r).scale(0.1);
        b.store.value_mut(id).add_assign_scaled(&noise, 1.0).expect("same shape");
    }
}

// 3
fn zero_convolution_identity() -> Outcome {
    let mut base = ModelBundle::new(presets::text(16, 2, 8, 2, 8), 1).map_err(e2s)?;
    jitter(&mut base, "denoiser", 3);
    let seg = base.init_control_from_base(9).map_err(e2s)?;
    let mut r = rng(4);
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let z = Tensor::randn(&seg.latent_batch_shape(1), &mut r);
        let t = r.random_range(1..=1000);
        let ctx = seg.encode_text(&format!("draw {i} of {}", r.random::<u32>())).map_err(e2s)?;
        let (_, lab) = phantom(r.random_range(1..500), ViewPhase::all()[(i % 4) as usize], 16);
        let map = seg.rasterize(&lab);
        let a = seg.control_denoise(&z, t, Some(&ctx), Some(&map)).map_err(e2s)?;
        let b = base.denoise(&z, t, Some(&ctx)).map_err(e2s)?;
        let rel = a.l2_distance(&b).map_err(e2s)? / b.l2_norm().max(1e-12);
        worst = worst.max(rel);
    }
    ensure(worst <= 1e-6, || format!("relative difference {worst:e}"))?;
    Ok(format!("20 draws, worst relative difference {worst:.1e}"))
}

// 4
fn freezing_contracts() -> Outcome {
    let mut c = TrainConfig::desk(GenerationMode::Text);
    c.schedule = ScheduleMeta { steps: 50, ..Default::default() };
    c.model.image_size = 8;
    c.model.base_width = 4;
    c.model.timestep_embedding_dim = 8;
    c.model.context_dim = 4;
    c.model.codec_factor = 1;
    c.model.latent_channels = 1;
    c.batch_size_per_device = 2;
    let base = ModelBundle::new(c.bundle_spec(), 0).map_err(e2s)?;
    let seg = base.init_control_from_base(1).map_err(e2s)?;
    c.mode = GenerationMode::TextSeg;
    c.max_iterations = 100;
    let recs = fixture_records(1..=2, 8);
    let data = TrainData::from_records(&recs, c.mode, [8, 8], c.prompt_style, None, None).map_err(e2s)?;
    let before = seg.base_checksum();
    let control_before = seg.store.checksum("control.");
    let out = train(&c, data, seg, None, None).map_err(e2s)?;
    ensure(out.bundle.base_checksum() == before, || "frozen base changed during control training".into())?;
    ensure(out.bundle.store.checksum("control.") != control_before, || "control branch never updated".into())?;

    let backbone = ConvBackbone::small(0, 16, &[4, 8]).map_err(e2s)?;
    let b_before = backbone.checksum();
    let cfg = ProbeConfig { image_size: 16, epochs: 50, ..ProbeConfig::desk() };
    let run = linear_probe(&cfg, &backbone, &fixture_records(1..=4, 16), &fixture_records(5..=6, 16)).map_err(e2s)?;
    ensure(backbone.checksum() == b_before && run.backbone_checksum == b_before, || {
        "probe backbone changed".into()
    })?;
    Ok("base fixed over 100 control steps; backbone fixed over 50 probe epochs".into())
}

fn check_gradients(bundle: &ModelBundle, f: &dyn Fn(&ModelBundle) -> f64, sample: &TrainSample, t: usize, eps: &Tensor) -> Result<usize, String> {
    let sch = NoiseSchedule::linear_default(50).map_err(e2s)?;
    let mut g = Graph::new(&bundle.store);
    let l = loss_graph(bundle, &mut g, &sch, &[sample], &[t], eps).map_err(e2s)?;
    let grads = g.backward(l).map_err(e2s)?;
    let mut checked = 0;
    for id in bundle.store.trainable_ids() {
        let Some(grad) = grads.get(id) else { continue };
        for k in 0..grad.numel() {
            let h = 1e-5;
            let mut plus = bundle.clone();
            plus.store.value_mut(id).data_mut()[k] += h;
            let mut minus = bundle.clone();
            minus.store.value_mut(id).data_mut()[k] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let an = grad.data()[k];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            ensure((fd - an).abs() / denom < 1e-3, || {
                format!("{}[{k}]: analytic {an} vs central difference {fd}", bundle.store.get(id).name)
            })?;
            checked += 1;
        }
    }
    Ok(checked)
}

// 5
fn gradient_oracle() -> Outcome {
    let mut spec = presets::unconditional(4, 2, 1);
    spec.denoiser.timestep_embedding_dim = 4;
    let unc = ModelBundle::new(spec, 3).map_err(e2s)?;
    let text = ModelBundle::new(
        BundleSpec {
            mode: GenerationMode::Text,
            image_size: [4, 4],
            denoiser: DenoiserSpec {
                in_channels: 1,
                base_width: 2,
                depth: 1,
                attention_levels: vec![0],
                timestep_embedding_dim: 4,
                context_dim: 4,
            },
            codec: CodecSpec::identity(1),
            text_encoder: Some(TextEncoderSpec {
                tokenizer: HASHED_WORDS.into(),
                vocab_size: 12,
                max_sequence_length: 4,
                embedding_dim: 4,
                trainable: true,
            }),
            control: None,
        },
        5,
    )
    .map_err(e2s)?;
    for b in [&unc, &text] {
        ensure(b.store.numel() <= 1000, || format!("micro model has {} parameters", b.store.numel()))?;
    }
    let sch = NoiseSchedule::linear_default(50).map_err(e2s)?;
    let x0 = Tensor::randn(&[1, 1, 4, 4], &mut rng(1));
    let eps = Tensor::randn(&[1, 1, 4, 4], &mut rng(2));
    let s = TrainSample { image: x0.clone(), prompt: None, label_map: None };
    let n1 = check_gradients(&unc, &|m| ddpm_loss(m, &sch, &x0, 17, &eps).expect("loss"), &s, 17, &eps)?;
    let p = render_textual(ViewPhase::all()[1]);
    let s = TrainSample { image: x0.clone(), prompt: Some(p.text.clone()), label_map: None };
    let n2 = check_gradients(&text, &|m| ldm_loss(m, &sch, &x0, &p, None, 9, &eps).expect("loss"), &s, 9, &eps)?;
    Ok(format!("{n1} pixel-loss and {n2} latent-loss entries within 1e-3"))
}

// 6
fn toy_overfit(work: &Path) -> Outcome {
    let scans = work.join("overfit-scans");
    write_fixture_tree(&scans, 2, 32, &[]).map_err(e2s)?;
    let report = ingest(&scans, Some(32)).map_err(e2s)?;
    ensure(report.records.len() == 8, || format!("{} fixture images", report.records.len()))?;
    let cfg = TrainConfig::desk(GenerationMode::Unconditional);
    ensure(cfg.model.image_size == 32 && cfg.schedule.steps == 200 && cfg.max_iterations == 2000, || {
        "desk preset is not 32×32, T=200, 2000 iterations".into()
    })?;
    let data = TrainData::from_records(&report.records, cfg.mode, [32, 32], cfg.prompt_style, None, None).map_err(e2s)?;
    let bundle = ModelBundle::new(cfg.bundle_spec(), cfg.seed).map_err(e2s)?;
    let out = train(&cfg, data, bundle, None, None).map_err(e2s)?;
    let losses: Vec<f64> = out.records.iter().map(|r| r.loss).collect();
    let lead = losses[..100].iter().sum::<f64>() / 100.0;
    let trail = losses[losses.len() - 100..].iter().sum::<f64>() / 100.0;
    let ratio = trail / lead;
    ensure(ratio < 0.25, || format!("trailing {trail:.4} / leading {lead:.4} = {ratio:.3}"))?;
    Ok(format!("trailing {trail:.4} / leading {lead:.4} = {ratio:.3}"))
}

fn gaussian_rows(n: usize, mean: &[f64], scale: &[f64], rot: &[Vec<f64>], seed: u64) -> FeatureSet {
    let d = mean.len();
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let z: Vec<f64> = (0..d).map(|k| scale[k] * r.sample::<f64, _>(StandardNormal)).collect();
        for i in 0..d {
            data.push(mean[i] + (0..d).map(|k| rot[i][k] * z[k]).sum::<f64>());
        }
    }
    FeatureSet::new(n, d, data, "gaussian").expect("finite")
}

/// Orthogonal matrix from Gram-Schmidt on a seeded random matrix.
fn rotation(d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        cols.push(v.into_iter().map(|a| a / n).collect());
    }
    (0..d).map(|i| (0..d).map(|k| cols[k][i]).collect()).collect()
}

// 7
fn fid_oracle() -> Outcome {
    let d = 8;
    let rot = rotation(d, 5);
    let ma: Vec<f64> = (0..d).map(|i| 0.1 * i as f64).collect();
    let mb: Vec<f64> = (0..d).map(|i| 0.1 * i as f64 + if i % 2 == 0 { 0.4 } else { -0.2 }).collect();
    let sa: Vec<f64> = (0..d).map(|i| 0.5 + 0.2 * i as f64).collect();
    let sb: Vec<f64> = (0..d).map(|i| 1.6 - 0.1 * i as f64).collect();
    let a = gaussian_rows(10_000, &ma, &sa, &rot, 11);
    let b = gaussian_rows(10_000, &mb, &sb, &rot, 12);
    // Shared eigenvectors: the trace term reduces to per-axis (σa − σb)².
    let closed: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
        + sa.iter().zip(&sb).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let self_fid = fid(&a, &a).map_err(e2s)?;
    ensure(self_fid.abs() < 1e-6, || format!("FID(A, A) = {self_fid:e}"))?;
    let ab = fid(&a, &b).map_err(e2s)?;
    let ba = fid(&b, &a).map_err(e2s)?;
    let rel = (ab - closed).abs() / closed;
    ensure(rel < 0.05, || format!("sampled {ab:.4} vs closed form {closed:.4}"))?;
    ensure((ab - ba).abs() < 1e-8, || format!("asymmetry {:e}", (ab - ba).abs()))?;
    Ok(format!("sampled {ab:.4} vs closed form {closed:.4} ({:.2}%), self {self_fid:.1e}", 100.0 * rel))
}

// 8
fn kid_oracle() -> Outcome {
    let eye: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|k| f64::from(u8::from(i == k))).collect()).collect();
    for n in 2..=6 {
        let a = gaussian_rows(n, &[0.0; 3], &[1.0; 3], &eye, 30 + n as u64);
        let b = gaussian_rows(n, &[0.3; 3], &[1.2; 3], &eye, 40 + n as u64);
        let (mean, _) = kid(&a, &b, KidParams { subset_size: Some(n), n_subsets: 1, seed: 0 }).map_err(e2s)?;
        let k = |p: &[f64], q: &[f64]| (p.iter().zip(q).map(|(s, t)| s * t).sum::<f64>() / 3.0 + 1.0).powi(3);
        let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    xx += k(a.row(i), a.row(j));
                    yy += k(b.row(i), b.row(j));
                }
                xy += k(a.row(i), b.row(j));
            }
        }
        let nn = n as f64;
        let brute = xx / (nn * (nn - 1.0)) + yy / (nn * (nn - 1.0)) - 2.0 * xy / (nn * nn);
        ensure(mean == brute, || format!("N={n}: {mean} vs brute force {brute}"))?;
    }
    let a = gaussian_rows(400, &[0.0; 4], &[1.0; 4], &rotation(4, 1), 50);
    let b = gaussian_rows(400, &[0.0; 4], &[1.0; 4], &rotation(4, 1), 51);
    let (mean, std) = kid(&a, &b, KidParams { subset_size: Some(100), n_subsets: 100, seed: 2 }).map_err(e2s)?;
    ensure(mean.abs() < 3.0 * std, || format!("same-distribution KID {mean:e} ± {std:e}"))?;
    Ok(format!("exact for N=2..6; same-distribution {mean:.2e} ± {std:.2e}"))
}

fn oracle_boundary(m: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = (m.height, m.width);
    let inside = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && m.data[r as usize * w + c as usize];
    let mut out = Vec::new();
    for r in 0..h as isize {
        for c in 0..w as isize {
            if inside(r, c) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| !inside(r + dr, c + dc)) {
                out.push((r as usize, c as usize));
            }
        }
    }
    out
}

fn oracle_directed(a: &[(usize, usize)], b: &[(usize, usize)]) -> Vec<f64> {
    a.iter()
        .map(|&(r, c)| {
            b.iter()
                .map(|&(s, t)| ((r as f64 - s as f64).powi(2) + (c as f64 - t as f64).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

// 9
fn segmentation_oracles() -> Outcome {
    let mut a = Mask::empty(4, 4);
    let mut b = Mask::empty(4, 4);
    for c in 0..4 {
        a.set(0, c);
        b.set(0, c);
    }
    for c in 0..4 {
        b.set(1, c);
        b.set(2, c);
    }
    let d = dice(&a, &b).map_err(e2s)?;
    ensure((d - 0.5).abs() < 1e-12, || format!("Dice fixture {d}"))?;
    let mut p = Mask::empty(8, 8);
    let mut q = Mask::empty(8, 8);
    p.set(0, 0);
    q.set(3, 4);
    let hd = hausdorff(&p, &q).map_err(e2s)?;
    ensure(hd == Some(5.0), || format!("single-pixel HD {hd:?}"))?;
    let same = (hausdorff(&b, &b).map_err(e2s)?, dice(&b, &b).map_err(e2s)?, average_surface_distance(&b, &b).map_err(e2s)?);
    ensure(same == (Some(0.0), 1.0, Some(0.0)), || format!("identical masks gave {same:?}"))?;
    let mut r = rng(9);
    for i in 0..10 {
        let mut m = [Mask::empty(16, 16), Mask::empty(16, 16)];
        for mask in &mut m {
            let density = r.random_range(0.1..0.6);
            for y in 0..16 {
                for x in 0..16 {
                    if r.random_bool(density) {
                        mask.set(y, x);
                    }
                }
            }
        }
        let (ea, eb) = (oracle_boundary(&m[0]), oracle_boundary(&m[1]));
        let (ab, ba) = (oracle_directed(&ea, &eb), oracle_directed(&eb, &ea));
        let hd_o = ab.iter().chain(&ba).fold(0.0f64, |x, &y| x.max(y));
        let asd_o = (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64;
        let hd = hausdorff(&m[0], &m[1]).map_err(e2s)?.ok_or("HD undefined")?;
        let asd = average_surface_distance(&m[0], &m[1]).map_err(e2s)?.ok_or("ASD undefined")?;
        ensure((hd - hd_o).abs() < 1e-9 && (asd - asd_o).abs() < 1e-9, || {
            format!("mask pair {i}: HD {hd} vs {hd_o}, ASD {asd} vs {asd_o}")
        })?;
    }
    Ok("Dice 0.5, HD 5, identity 0/1/0, 10 random pairs agree with all-pairs oracle".into())
}

fn descriptors(n_patients: usize, per: usize, prov: Provenance, image: &Path, prefix: &str) -> Vec<RecordDescriptor> {
    (1..=n_patients)
        .flat_map(|p| {
            ViewPhase::all().into_iter().take(per).map(move |vp| RecordDescriptor {
                patient_id: format!("{prefix}{p:04}"),
                view: vp.view,
                phase: vp.phase,
                provenance: prov,
                image: image.to_path_buf(),
                label: None,
                prompt: None,
            })
        })
        .collect()
}

// 10
fn split_and_mix(work: &Path) -> Outcome {
    let img = work.join("pixel.png");
    GrayImage::new(1, 1, vec![0.5]).map_err(e2s)?.save_png(&img, BitDepth::Eight).map_err(e2s)?;
    let real = DatasetManifest::new("real", [1, 1], 0, BitDepth::Eight, descriptors(450, 4, Provenance::Real, &img, "patient"), work)
        .map_err(e2s)?;
    let (train, val) = split_patients(&real.records, SplitSpec::default()).map_err(e2s)?;
    ensure((train.len(), val.len()) == (1600, 200), || format!("split {}/{}", train.len(), val.len()))?;
    let train = real.subset("train", train).map_err(e2s)?;
    let synth =
        DatasetManifest::new("syn", [1, 1], 0, BitDepth::Eight, descriptors(800, 4, Provenance::Synthetic, &img, "synthetic"), work)
            .map_err(e2s)?;
    let mut sizes = Vec::new();
    for p in [50, 100, 200] {
        sizes.push(mix_real_synthetic(&train, &synth, p, 0).map_err(e2s)?.len());
    }
    ensure(sizes == [2400, 3200, 4800], || format!("mix sizes {sizes:?}"))?;
    let mut r = rng(10);
    for _ in 0..100 {
        let n = r.random_range(2..80);
        let items: Vec<RecordDescriptor> = descriptors(n, r.random_range(1..=4), Provenance::Real, &img, "p");
        let k = r.random_range(1..n);
        let (t, v) = split_patients(&items, SplitSpec { validation_patient_count: k }).map_err(e2s)?;
        let tp: BTreeSet<&str> = t.iter().map(|d| d.patient_id.as_str()).collect();
        let vpids: BTreeSet<&str> = v.iter().map(|d| d.patient_id.as_str()).collect();
        ensure(tp.is_disjoint(&vpids) && vpids.len() == k && t.len() + v.len() == items.len(), || {
            format!("split of {n} patients with {k} held out is not a disjoint partition")
        })?;
    }
    Ok("1600/200 split; 2400/3200/4800 mixes; 100 random splits disjoint".into())
}

// 11
fn prompt_invariants() -> Outcome {
    let mut r = rng(11);
    for _ in 0..1000 {
        let seed = r.random::<u64>();
        let lex = ConceptLexicon::build(seed, 8).map_err(e2s)?;
        ensure(lex == ConceptLexicon::build(seed, 8).map_err(e2s)?, || format!("seed {seed} not deterministic"))?;
        let tokens: BTreeSet<&str> = lex.tokens().collect();
        ensure(tokens.len() == 6, || format!("seed {seed}: tokens collide"))?;
        let prompts: Vec<_> = ViewPhase::all().into_iter().map(|vp| render_abstract(vp, &lex)).collect::<Result<_, _>>().map_err(e2s)?;
        let texts: BTreeSet<&str> = prompts.iter().map(|p| p.text.as_str()).collect();
        ensure(texts.len() == 4, || format!("seed {seed}: prompts collide"))?;
        for p in &prompts {
            let words: Vec<&str> = p.text.split(' ').collect();
            let view = lex.token(ConceptSlot::ViewWord, if p.view_phase.view.chambers() == 2 { "two-chamber" } else { "four-chamber" }).map_err(e2s)?;
            let phase = lex.token(ConceptSlot::PhaseWord, if p.view_phase.phase.index() == 0 { "ed" } else { "es" }).map_err(e2s)?;
            let shared = [lex.token(ConceptSlot::Modality, "ultrasound image").map_err(e2s)?, lex.token(ConceptSlot::Organ, "heart").map_err(e2s)?];
            ensure(words.contains(&view) && words.contains(&phase) && shared.iter().all(|t| words.contains(t)), || {
                format!("seed {seed}: {} does not carry its concept tokens", p.view_phase)
            })?;
            ensure(lex.decode(&p.text) == Some(p.view_phase), || format!("seed {seed}: {} does not round-trip", p.view_phase))?;
        }
    }
    Ok("1000 seeded lexicons".into())
}

struct E2eRun {
    synthetic_manifest: String,
    report: String,
}

fn e2e_once(root: &Path, data: &Path) -> Result<E2eRun, String> {
    let mut text = TrainConfig::desk(GenerationMode::Text);
    text.max_iterations = 1000;
    text.checkpoint_every = 1000;
    let t = cmd_train(&TrainArgs { config: text, data: data.join("train"), run_dir: root.join("text"), resume: false })
        .map_err(e2s)?;
    let mut seg = TrainConfig::desk(GenerationMode::TextSeg);
    seg.max_iterations = 1000;
    seg.checkpoint_every = 1000;
    seg.base_checkpoint = t.last_checkpoint;
    ensure(seg.model.image_size == 64, || "text_seg preset is not 64×64".into())?;
    let s = cmd_train(&TrainArgs { config: seg, data: data.join("train"), run_dir: root.join("text_seg"), resume: false })
        .map_err(e2s)?;
    let ckpt = s.last_checkpoint.ok_or("no text_seg checkpoint")?;
    ensure(ckpt.starts_with(root.join("text_seg").join(CHECKPOINT_DIR)), || "checkpoint outside run".into())?;

    let mut synth = SynthArgs::new(ckpt, root.join("synthetic"), 32);
    synth.label_source = Some(data.join("train"));
    synth.no_repeat = true;
    let sy = cmd_synthesize(&synth).map_err(e2s)?;
    ensure(sy.count == 32, || format!("{} synthetic images", sy.count))?;

    let mut eval = EvalArgs::new(data.join("validation"), root.join("synthetic"), root.join("generation"));
    eval.extractor = "random-projection:0:16:32".into();
    eval.model = "text_seg".into();
    let gen = cmd_evaluate(&eval).map_err(e2s)?;
    let table = &gen.generation[0];
    ensure(table.cells.iter().all(|c| c.fid.is_some_and(f64::is_finite) && c.kid_mean.is_some()), || {
        format!("undefined generation cells: {:?}", table.cells)
    })?;

    let ds = cmd_downstream_seg(&SegArgs {
        regimes: RegimeArgs {
            train: data.join("train"),
            validation: data.join("validation"),
            synthetic: Some(root.join("synthetic")),
            mix_percents: vec![0, 100],
            out: root.join("segmentation"),
        },
        config: SegConfig::desk(),
    })
    .map_err(e2s)?;
    ensure(ds.comparison.is_some() && ds.report.segmentation.len() == 2, || "segmentation comparison missing".into())?;
    let merged = cmd_report(&[root.join("generation"), root.join("segmentation")], &root.join("report")).map_err(e2s)?;
    let md = merged.to_markdown();
    ensure(md.contains("## Generation quality") && md.contains("## Segmentation") && md.contains("Real+100%"), || {
        "report lacks generation or segmentation tables".into()
    })?;
    let manifest = std::fs::read_to_string(root.join("synthetic").join("manifest.json")).map_err(e2s)?;
    Ok(E2eRun { synthetic_manifest: manifest, report: md })
}

// 12
fn end_to_end(work: &Path) -> Outcome {
    let scans = work.join("e2e-scans");
    write_fixture_tree(&scans, 58, 64, &[]).map_err(e2s)?;
    let report = ingest(&scans, Some(64)).map_err(e2s)?;
    let (train, val) = split_patients(&report.records, SplitSpec::default()).map_err(e2s)?;
    let data = work.join("e2e-data");
    write_records(&train, &data.join("train"), "train", 0, BitDepth::Sixteen, [64, 64]).map_err(e2s)?;
    write_records(&val, &data.join("validation"), "validation", 0, BitDepth::Sixteen, [64, 64]).map_err(e2s)?;
    ensure(read_manifest(&data.join("train")).map_err(e2s)?.len() == 32, || "train split is not 32 images".into())?;
    let first = e2e_once(&work.join("e2e-a"), &data)?;
    let second = e2e_once(&work.join("e2e-b"), &data)?;
    ensure(first.synthetic_manifest == second.synthetic_manifest, || "re-run produced a different synthetic manifest".into())?;
    ensure(first.report == second.report, || "re-run produced a different report".into())?;
    let dice_line = first.report.lines().filter(|l| l.starts_with("| Real") && l.contains("| mean |")).collect::<Vec<_>>().join("; ");
    Ok(format!("two identical runs; {dice_line}"))
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let w: PathBuf = work.path().to_path_buf();
    let minute = Duration::from_secs(60);
    let criteria: Vec<(&str, Duration, Box<dyn FnOnce() -> Outcome>)> = vec![
        ("schedule correctness", Duration::from_secs(1), Box::new(schedule_correctness)),
        ("diffusion round trip", Duration::from_secs(10), Box::new(diffusion_round_trip)),
        ("zero-convolution identity", Duration::from_secs(30), Box::new(zero_convolution_identity)),
        ("freezing contracts", 2 * minute, Box::new(freezing_contracts)),
        ("gradient oracle", minute, Box::new(gradient_oracle)),
        ("toy overfit", 10 * minute, Box::new({ let w = w.clone(); move || toy_overfit(&w) })),
        ("FID oracle", minute, Box::new(fid_oracle)),
        ("KID oracle", minute, Box::new(kid_oracle)),
        ("segmentation-metric oracles", minute, Box::new(segmentation_oracles)),
        ("split and mix arithmetic", minute, Box::new({ let w = w.clone(); move || split_and_mix(&w) })),
        ("prompt invariants", Duration::from_secs(1), Box::new(prompt_invariants)),
        ("end-to-end smoke", 30 * minute, Box::new({ let w = w.clone(); move || end_to_end(&w) })),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > limit => Err(format!("{detail}; took {took:.1?}, limit {limit:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS  {:>2} {name} ({took:.2?}): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:>2} {name} ({took:.2?}): {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} of 12 criteria passed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
