//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line for its
//! criterion, preceded by a line per failed check.

use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use danet::bins::{bin_centers, combine, normalize_bin_widths};
use danet::data::{
    apply_augment, generate_scene, load_manifest, read_sample, write_manifest, write_rgb_png, write_sample,
    AugmentParams, DatasetManifest, SceneMeta, SyntheticConfig,
};
use danet::eval::{diagnose, evaluate, EvalOptions, EvalReport};
use danet::losses::{
    chamfer_bin_loss, chamfer_bin_loss_with_grad, depth_related_weights, minmax_loss, minmax_loss_with_grad, ssi_loss,
    ssi_loss_with_grad, total_loss, WeightMode,
};
use danet::metrics::{depth_histogram, drift_report, error_map, histogram_edges, standard_metrics};
use danet::network::{decoder_forward, fcb_forward, init_decoder, init_fcb, Backbone, ToyBackbone};
use danet::nn::{Initializer, ParamStore, Session};
use danet::optim::OptimizerConfig;
use danet::pst::{aec_embed, compute_aec_geometry, init_pst, path_forward, pst_forward, AecGeometry, PstConfig};
use danet::tensor::{resize_bilinear, Tensor};
use danet::train::{load_dataset, sample_gradient, train, DatasetSource, StageSchedule, TrainConfig, TrainLog};
use danet::{
    BinProbabilityMap, DaNet, DepthMap, DepthRange, NetworkConfig, RgbImage, SceneSample, StageConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Criterion {
    name: &'static str,
    checks: usize,
    failures: Vec<String>,
    start: Instant,
}

impl Criterion {
    fn new(name: &'static str) -> Self {
        Self { name, checks: 0, failures: Vec::new(), start: Instant::now() }
    }

    fn check(&mut self, label: impl Into<String>, ok: bool) {
        self.checks += 1;
        if !ok {
            let label = label.into();
            println!("  failed: {label}");
            self.failures.push(label);
        }
    }

    fn note(&self, text: impl AsRef<str>) {
        println!("  {}", text.as_ref());
    }

    fn finish(self, limit_secs: f64) {
        let secs = self.start.elapsed().as_secs_f64();
        let ok = self.failures.is_empty() && secs < limit_secs;
        println!(
            "{}: {} ({} checks, {:.1}s of {:.0}s budget)",
            self.name,
            if ok { "PASS" } else { "FAIL" },
            self.checks,
            secs,
            limit_secs
        );
        assert!(self.failures.is_empty(), "{}: failed checks {:?}", self.name, self.failures);
        assert!(secs < limit_secs, "{}: took {secs:.1}s", self.name);
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn all_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| close(*x, *y, tol))
}

fn range(lo: f64, hi: f64) -> DepthRange<f64> {
    DepthRange::new(lo, hi).unwrap()
}

fn map(h: usize, w: usize, v: Vec<f64>) -> DepthMap<f64> {
    DepthMap::new(h, w, v).unwrap()
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// `(in - kernel) / stride + 1` along each axis.
fn sliding_window(g: &AecGeometry) -> (usize, usize) {
    ((g.in_h - g.kernel_h) / g.stride_y + 1, (g.in_w - g.kernel_w) / g.stride_x + 1)
}

/// Parameter count of a configuration, enumerated layer by layer.
fn enumerate_parameters(cfg: &NetworkConfig) -> usize {
    let conv = |o: usize, i: usize, k: usize| o * i * k * k + o;
    let lin = |o: usize, i: usize| o * i + o;
    let ceil_half = |n: usize| (n + 1) / 2;
    let mut total = 0;
    let mut in_c = 3;
    for &c in &cfg.backbone_channels {
        total += conv(c, in_c, 3) + 2 * c;
        in_c = c;
    }
    for &c in &cfg.backbone_channels[..4] {
        total += conv(16, c, 3) + conv(16, 16, 1);
    }
    let c5 = cfg.backbone_channels[4];
    if cfg.use_pst {
        let (mut h5, mut w5) = (cfg.input_h, cfg.input_w);
        for _ in 0..5 {
            h5 = ceil_half(h5);
            w5 = ceil_half(w5);
        }
        let d = cfg.embed_dim;
        let ff = cfg.ff_mult * d;
        for j in 0..3 {
            let h = (h5 >> j).max(1);
            let w = (w5 >> j).max(1);
            let kh = h5 - (h5 / h) * (h - 1);
            let kw = w5 - (w5 / w) * (w - 1);
            total += d * c5 * kh * kw + d + h * w * d;
            if j == 0 {
                total += d;
            }
            total += cfg.encoder_layers * (4 * d + 4 * lin(d, d) + lin(ff, d) + lin(d, ff));
        }
        total += conv(16, 3 * d, 3) + conv(16, 16, 3) + conv(16, 16, 1);
        total += lin(d, d) + lin(cfg.num_bins, d);
    } else {
        total += conv(16, c5, 3) + conv(16, 16, 1);
    }
    total + 12 * conv(16, 16, 3) + conv(cfg.num_bins, 16, 1)
}

/// Parameter count of the default configuration, pinned.
const GOLDEN_DEFAULT_PARAMETERS: usize = 352_832;

fn small_pst(in_h: usize, in_w: usize, embed: usize, bins: usize) -> PstConfig {
    PstConfig { in_channels: 6, in_h, in_w, embed_dim: embed, heads: 2, layers: 1, ff_mult: 2, num_bins: bins, tau: 1e-3 }
}

fn pst_store(cfg: &PstConfig, seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    init_pst(&mut Initializer::new(&mut store, ChaCha8Rng::seed_from_u64(seed)), "pst", cfg).unwrap();
    store
}

fn random_image(h: usize, w: usize, seed: u64) -> RgbImage<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::new(h, w, uniform_vec(&mut rng, 3 * h * w, 0.0, 1.0)).unwrap()
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        seed: 5,
        batch_size: 2,
        local: StageSchedule { epochs: 1, loss: StageConfig::local() },
        global: StageSchedule { epochs: 1, loss: StageConfig::global() },
        network: NetworkConfig {
            input_h: 32,
            input_w: 32,
            backbone_channels: [4, 6, 8, 8, 16],
            num_bins: 8,
            embed_dim: 8,
            heads: 2,
            encoder_layers: 1,
            ..NetworkConfig::default()
        },
        dataset: DatasetSource::Synthetic { count: 3, seed: 2, min_objects: 2, max_objects: 8 },
        ..TrainConfig::default()
    }
}

fn core_examples(c: &mut Criterion) {
    c.check("normalize zeros", normalize_bin_widths(&[0.0; 4], 0.1).unwrap() == vec![0.25; 4]);
    c.check(
        "normalize (1,3)",
        all_close(&normalize_bin_widths(&[1.0, 3.0], 0.5).unwrap(), &[1.5 / 5.0, 3.5 / 5.0], 1e-15),
    );
    c.check("normalize single", normalize_bin_widths(&[5.0], 0.001).unwrap() == vec![1.0]);

    let r = range(0.0, 10.0);
    let centers_oracle = |b: &[f64]| -> Vec<f64> {
        let mut acc = 0.0;
        b.iter()
            .map(|&w| {
                let c = 10.0 * (acc + w / 2.0);
                acc += w;
                c
            })
            .collect()
    };
    c.check("centers (1)", bin_centers(&[1.0], &r).unwrap() == vec![5.0]);
    for b in [vec![0.5, 0.5], vec![0.2, 0.3, 0.5]] {
        let got = bin_centers(&b, &r).unwrap();
        c.check(format!("centers {b:?}"), all_close(&got, &centers_oracle(&b), 1e-12));
    }
    c.check("centers (0.2,0.3,0.5) literal", all_close(&bin_centers(&[0.2, 0.3, 0.5], &r).unwrap(), &[1.0, 3.5, 7.5], 1e-12));

    let cs = [1.0, 2.5, 4.0];
    for k in 0..3 {
        let y = combine(&BinProbabilityMap::one_hot(2, 3, 3, k).unwrap(), &cs).unwrap();
        c.check(format!("combine one-hot {k}"), y.values().iter().all(|&v| v == cs[k]));
    }
    let uni = BinProbabilityMap::new(2, 2, 2, vec![0.5; 8]).unwrap();
    c.check("combine uniform", combine(&uni, &[2.0, 4.0]).unwrap().values().iter().all(|&v| close(v, 0.5 * 2.0 + 0.5 * 4.0, 1e-15)));
    let p = BinProbabilityMap::new(1, 1, 2, vec![0.25, 0.75]).unwrap();
    c.check("combine (0.25,0.75)", close(combine(&p, &[2.0, 4.0]).unwrap().values()[0], 0.25 * 2.0 + 0.75 * 4.0, 1e-15));
}

fn pst_examples(c: &mut Criterion) {
    for (args, stride, kernel) in [
        ((8, 8, 4, 4), (2, 2), (2, 2)),
        ((8, 8, 8, 8), (1, 1), (1, 1)),
        ((7, 10, 4, 4), (1, 2), (4, 4)),
    ] {
        let g = compute_aec_geometry(args.0, args.1, args.2, args.3).unwrap();
        c.check(format!("geometry {args:?} stride"), (g.stride_y, g.stride_x) == stride);
        c.check(format!("geometry {args:?} kernel"), (g.kernel_h, g.kernel_w) == kernel);
        c.check(format!("geometry {args:?} window"), sliding_window(&g) == (args.2, args.3));
    }

    // Identity 1x1 embedding is a per-pixel projection.
    let g = compute_aec_geometry(5, 6, 5, 6).unwrap();
    let mut store = ParamStore::<f64>::new();
    Initializer::new(&mut store, ChaCha8Rng::seed_from_u64(1)).conv("aec", 4, 4, 1, 1);
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 5] = 1.0;
    }
    *store.get_mut("aec.weight").unwrap() = Tensor::new(&[4, 4, 1, 1], eye);
    let x = uniform_vec(&mut ChaCha8Rng::seed_from_u64(2), 4 * 30, -1.0, 1.0);
    let mut s = Session::new(&store);
    let xv = s.graph.constant(Tensor::new(&[4, 5, 6], x.clone()));
    let y = aec_embed(&mut s, "aec", xv, &g).unwrap();
    c.check("aec identity projection", s.graph.value(y).data() == x.as_slice());

    for (ih, iw) in [(8, 8), (7, 10)] {
        let g = compute_aec_geometry(ih, iw, 4, 4).unwrap();
        let mut store = ParamStore::<f64>::new();
        Initializer::new(&mut store, ChaCha8Rng::seed_from_u64(3)).conv("aec", 5, 2, g.kernel_h, g.kernel_w);
        let mut s = Session::new(&store);
        let xv = s.graph.constant(Tensor::new(&[2, ih, iw], vec![0.5; 2 * ih * iw]));
        let y = aec_embed(&mut s, "aec", xv, &g).unwrap();
        let sh = s.graph.shape(y);
        c.check(format!("aec {ih}x{iw} -> 16 embeddings"), sh == [5, 4, 4] && sh[1] * sh[2] == 16);
        // No padding: the last window ends exactly on the last row and column.
        c.check(
            format!("aec {ih}x{iw} no padding"),
            3 * g.stride_y + g.kernel_h == ih && 3 * g.stride_x + g.kernel_w == iw,
        );
    }

    let cfg = small_pst(8, 10, 8, 4);
    let store = pst_store(&cfg, 4);
    let x5 = uniform_vec(&mut ChaCha8Rng::seed_from_u64(5), 6 * 80, -1.0, 1.0);
    let mut s = Session::new(&store);
    let xv = s.graph.constant(Tensor::new(&[6, 8, 10], x5.clone()));
    let p1 = path_forward(&mut s, "pst", xv, 1, &cfg).unwrap();
    let special_ok = p1.special.is_some_and(|v| s.graph.shape(v) == [1, 8]);
    c.check("path 1 sequence 80 + 1", p1.seq_len == 81 && s.graph.shape(p1.grid) == [8, 8, 10] && special_ok);
    let p2 = path_forward(&mut s, "pst", xv, 2, &cfg).unwrap();
    c.check("path 2 target 4x5", p2.seq_len == 20 && s.graph.shape(p2.grid) == [8, 4, 5] && p2.special.is_none());

    // Zero projections leave only the residual stream.
    let mut zeroed = store.clone();
    for (name, t) in zeroed.iter_mut() {
        if name.starts_with("pst.path2.encoder") && !name.contains(".ln") {
            t.data_mut().fill(0.0);
        }
    }
    let mut s = Session::new(&zeroed);
    let xv = s.graph.constant(Tensor::new(&[6, 8, 10], x5.clone()));
    let out = path_forward(&mut s, "pst", xv, 2, &cfg).unwrap();
    let g2 = cfg.geometry(2).unwrap();
    let emb = aec_embed(&mut s, "pst.path2.aec", xv, &g2).unwrap();
    let emb = s.graph.value(emb).data().to_vec();
    let pos = zeroed.get("pst.path2.pos").unwrap().data();
    let cells = 20;
    let expected: Vec<f64> = (0..8 * cells).map(|i| emb[i] + pos[(i % cells) * 8 + i / cells]).collect();
    c.check("zero-weight transformer is identity", all_close(s.graph.value(out.grid).data(), &expected, 1e-12));

    let mut s = Session::new(&store);
    let xv = s.graph.constant(Tensor::new(&[6, 8, 10], x5.clone()));
    let out = pst_forward(&mut s, "pst", xv, &cfg, range(0.0, 10.0)).unwrap();
    c.check("pst fused shape", s.graph.shape(out.fused) == [16, 8, 10]);

    let mut flat = store.clone();
    flat.get_mut("pst.bins.fc2.weight").unwrap().data_mut().fill(0.0);
    flat.get_mut("pst.bins.fc2.bias").unwrap().data_mut().fill(0.0);
    let mut s = Session::new(&flat);
    let xv = s.graph.constant(Tensor::new(&[6, 8, 10], x5.clone()));
    let out = pst_forward(&mut s, "pst", xv, &cfg, range(0.0, 10.0)).unwrap();
    let uniform: Vec<f64> = (0..4).map(|i| 10.0 * (i as f64 + 0.5) / 4.0).collect();
    c.check("zero head gives uniform centers", all_close(s.graph.value(out.centers).data(), &uniform, 1e-12));
    c.check("zero head literal centers", all_close(&uniform, &[1.25, 3.75, 6.25, 8.75], 1e-15));

    let wide = small_pst(8, 10, 32, 4);
    let store = pst_store(&wide, 6);
    let mut s = Session::new(&store);
    let xv = s.graph.constant(Tensor::new(&[6, 8, 10], x5));
    let out = pst_forward(&mut s, "pst", xv, &wide, range(0.0, 10.0)).unwrap();
    c.check("concat has 3 * C_e channels", s.graph.shape(out.concat) == [96, 8, 10]);
}

fn network_examples(c: &mut Criterion) {
    let net = DaNet::<f64>::new(NetworkConfig::default(), 1).unwrap();
    let mut s = Session::new(net.params());
    let out = net.forward(&mut s, &random_image(64, 64, 1)).unwrap();
    let sizes: Vec<usize> = out.pyramid.levels.iter().map(|&v| s.graph.shape(v)[1]).collect();
    c.check("64x64 halving chain", sizes == [32, 16, 8, 4, 2]);
    let channels: Vec<usize> = out.pyramid.levels.iter().map(|&v| s.graph.shape(v)[0]).collect();
    c.check("channel plan echoed", channels == [16, 24, 40, 80, 160]);
    c.check("end-to-end decoder shape", s.graph.shape(out.decoded) == [16, 32, 32]);

    let bb = ToyBackbone { channels: [2, 2, 2, 2, 3] };
    let mut store = ParamStore::<f64>::new();
    bb.init(&mut Initializer::new(&mut store, ChaCha8Rng::seed_from_u64(2)), "b");
    let mut s = Session::new(&store);
    let img = random_image(228, 304, 2);
    let x = s.graph.constant(Tensor::new(&[3, 228, 304], img.data().to_vec()));
    let pyr = bb.forward(&mut s, "b", x).unwrap();
    let (mut h, mut w) = (228usize, 304usize);
    for _ in 0..5 {
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    c.check("228x304 -> x5 8x10", s.graph.shape(pyr.levels[4]) == [3, h, w] && (h, w) == (8, 10));

    let mut store = ParamStore::<f64>::new();
    init_fcb(&mut Initializer::new(&mut store, ChaCha8Rng::seed_from_u64(3)), "f", 40);
    let mut s = Session::new(&store);
    let x = s.graph.constant(Tensor::new(&[40, 16, 16], uniform_vec(&mut ChaCha8Rng::seed_from_u64(4), 40 * 256, -1.0, 1.0)));
    let y = fcb_forward(&mut s, "f", x);
    c.check("fcb 40ch 16x16 -> 16ch 16x16", s.graph.shape(y) == [16, 16, 16]);
    let zero = s.graph.constant(Tensor::zeros(&[40, 4, 4]));
    let y = fcb_forward(&mut s, "f", zero);
    let silu = |v: f64| v / (1.0 + (-v).exp());
    let (b3, w1, b1) = (
        store.get("f.conv3.bias").unwrap().data(),
        store.get("f.conv1.weight").unwrap().data(),
        store.get("f.conv1.bias").unwrap().data(),
    );
    let bias_response: Vec<f64> = (0..16).map(|o| b1[o] + (0..16).map(|i| w1[o * 16 + i] * silu(b3[i])).sum::<f64>()).collect();
    let got = s.graph.value(y).data();
    c.check("fcb zero input -> bias response", (0..16 * 16).all(|i| close(got[i], bias_response[i / 16], 1e-12)));

    // Centered identity tap in the 3x3 stage: the block reduces to the 1x1 projection of silu(x).
    let mut store = ParamStore::<f64>::new();
    init_fcb(&mut Initializer::new(&mut store, ChaCha8Rng::seed_from_u64(5)), "f", 16);
    let mut w3 = vec![0.0; 16 * 16 * 9];
    for ch in 0..16 {
        w3[(ch * 16 + ch) * 9 + 4] = 1.0;
    }
    *store.get_mut("f.conv3.weight").unwrap() = Tensor::new(&[16, 16, 3, 3], w3);
    store.get_mut("f.conv3.bias").unwrap().data_mut().fill(0.0);
    let x = uniform_vec(&mut ChaCha8Rng::seed_from_u64(6), 16 * 9, -2.0, 2.0);
    let mut s = Session::new(&store);
    let xv = s.graph.constant(Tensor::new(&[16, 3, 3], x.clone()));
    let y = fcb_forward(&mut s, "f", xv);
    let (w1, b1) = (store.get("f.conv1.weight").unwrap().data(), store.get("f.conv1.bias").unwrap().data());
    let got = s.graph.value(y).data();
    let ok = (0..16).all(|o| {
        (0..9).all(|p| {
            let want = b1[o] + (0..16).map(|i| w1[o * 16 + i] * silu(x[i * 9 + p])).sum::<f64>();
            close(got[o * 9 + p], want, 1e-12)
        })
    });
    c.check("fcb projection-only map", ok);

    let mut store = ParamStore::<f64>::new();
    init_decoder(&mut Initializer::new(&mut store, ChaCha8Rng::seed_from_u64(7)), "d");
    let fused_data = uniform_vec(&mut ChaCha8Rng::seed_from_u64(8), 16 * 4, -1.0, 1.0);
    let mut s = Session::new(&store);
    let fused = s.graph.constant(Tensor::new(&[16, 2, 2], fused_data.clone()));
    let skips = [4, 8, 16, 32].map(|n| s.graph.constant(Tensor::new(&[16, n, n], vec![0.1; 16 * n * n])));
    let y = decoder_forward(&mut s, "d", fused, &skips).unwrap();
    c.check("decoder 2x2 -> 32x32x16", s.graph.shape(y) == [16, 32, 32]);
    let mut zeroed = store.clone();
    for (_, t) in zeroed.iter_mut() {
        t.data_mut().fill(0.0);
    }
    let mut s = Session::new(&zeroed);
    let fused = s.graph.constant(Tensor::new(&[16, 2, 2], fused_data.clone()));
    let skips = [4, 8, 16, 32].map(|n| s.graph.constant(Tensor::zeros(&[16, n, n])));
    let y = decoder_forward(&mut s, "d", fused, &skips).unwrap();
    let mut up = fused_data;
    let mut n = 2;
    while n < 32 {
        up = resize_bilinear(&up, 16, n, n, 2 * n, 2 * n);
        n *= 2;
    }
    c.check("degenerate decoder is pure upsampling", all_close(s.graph.value(y).data(), &up, 1e-12));

    let net = DaNet::<f32>::new(NetworkConfig::default(), 9).unwrap();
    let p = net.predict(&random_image(64, 64, 9).cast()).unwrap();
    let plane = p.probs.height() * p.probs.width();
    let sums_ok = (0..plane).all(|px| {
        let sum: f64 = (0..p.probs.bins()).map(|k| p.probs.probs()[k * plane + px] as f64).sum();
        close(sum, 1.0, 1e-6)
    });
    c.check("probabilities sum to 1", sums_ok);
    let cs = p.bins.centers();
    let (lo, hi) = (cs[0], cs[cs.len() - 1]);
    c.check("depth within [c_1, c_Nb]", p.depth.values().iter().all(|&d| d >= lo && d <= hi) && lo > 0.0 && hi < 10.0);
    let oracle = enumerate_parameters(&NetworkConfig::default());
    c.note(format!("default parameter count: {} (enumerated {oracle})", net.num_parameters()));
    c.check("parameter count matches enumeration", net.num_parameters() == oracle);
    c.check("parameter count matches golden value", net.num_parameters() == GOLDEN_DEFAULT_PARAMETERS);
}

fn loss_examples(c: &mut Criterion) {
    let gt = map(2, 3, vec![1.0, 2.0, 3.0, 4.5, 6.0, 9.0]);
    c.check("ssi pred = gt", ssi_loss(&gt, &gt, None, 0.85).unwrap() == 0.0);
    let scaled = map(2, 3, gt.values().iter().map(|v| v * 1.7).collect());
    c.check("ssi scale at u = 1", close(ssi_loss(&scaled, &gt, None, 1.0).unwrap(), 0.0, 1e-12));
    let e = std::f64::consts::E;
    let single = ssi_loss(&map(1, 1, vec![2.0 * e]), &map(1, 1, vec![2.0]), None, 0.85).unwrap();
    c.check("ssi single pixel", close(single, (1.0f64 - 0.85).sqrt(), 1e-12) && close(single, 0.3873, 1e-4));

    let gt = map(2, 2, vec![1.0, 4.0, 4.0, 7.0]);
    c.check("chamfer exact centers", chamfer_bin_loss(&[1.0, 4.0, 7.0], &gt).unwrap() == 0.0);
    let nn_oracle = |cs: &[f64], xs: &[f64]| {
        let to_c: f64 = xs.iter().map(|x| cs.iter().map(|c| (x - c) * (x - c)).fold(f64::INFINITY, f64::min)).sum();
        let to_x: f64 = cs.iter().map(|c| xs.iter().map(|x| (x - c) * (x - c)).fold(f64::INFINITY, f64::min)).sum();
        to_c + to_x
    };
    let got = chamfer_bin_loss(&[1.0, 3.0], &map(1, 2, vec![1.0, 2.0])).unwrap();
    c.check("chamfer (1,3) vs {1,2}", got == nn_oracle(&[1.0, 3.0], &[1.0, 2.0]) && got == 2.0);
    let cs = [0.5, 6.0, 2.25, 9.0];
    let perm = [9.0, 0.5, 6.0, 2.25];
    c.check("chamfer permutation", chamfer_bin_loss(&cs, &gt).unwrap() == chamfer_bin_loss(&perm, &gt).unwrap());

    c.check("minmax exact endpoints", minmax_loss(&[1.0, 3.0, 7.0], &gt).unwrap() == 0.0);
    let spanning = map(1, 3, vec![0.001, 5.0, 10.0]);
    let cs: Vec<f64> = (1..=9).map(f64::from).collect();
    c.check("minmax (1..9) vs [0.001, 10]", close(minmax_loss(&cs, &spanning).unwrap(), (1.0 - 0.001) + (10.0 - 9.0), 1e-12));
    c.check("minmax constant gt", minmax_loss(&[2.5; 4], &DepthMap::constant(3, 3, 2.5).unwrap()).unwrap() == 0.0);

    let g = map(1, 5, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    let lam = depth_related_weights(&g, 1.0).values;
    c.check("lambda at median", lam[2] == 0.0);
    c.check("lambda at extremes", lam[0] == 1.0 && lam[4] == 1.0);
    let med = 3.0;
    let oracle: Vec<f64> =
        g.values().iter().map(|&x| if x <= med { (med - x) / (med - 1.0) } else { (x - med) / (5.0 - med) }).collect();
    c.check("lambda (1..5)", lam == oracle && lam == vec![1.0, 0.5, 0.0, 0.5, 1.0]);

    let l = StageConfig::local();
    c.check(
        "local stage constants",
        (l.alpha, l.beta, l.gamma, l.u, l.weight_mode) == (10.0, 0.1, 0.0, 0.85, WeightMode::Zero),
    );
    let gl = StageConfig::global();
    c.check(
        "global stage constants",
        (gl.alpha, gl.beta, gl.gamma, gl.u, gl.v, gl.weight_mode) == (10.0, 0.1, 0.1, 0.85, 1.0, WeightMode::DepthRelated),
    );
    let zero = StageConfig { alpha: 0.0, beta: 0.0, gamma: 0.0, ..StageConfig::global() };
    let pred = map(2, 2, vec![2.0, 3.0, 5.0, 8.0]);
    c.check("zero coefficients", total_loss(&pred, &gt, &[2.0, 5.0], &zero).unwrap().total == 0.0);
}

fn metric_examples(c: &mut Criterion) {
    let gt = map(2, 3, vec![0.5, 1.0, 2.0, 3.0, 5.0, 8.0]);
    let m = standard_metrics(&gt, &gt).unwrap();
    c.check("metrics identity", m.values() == [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    let m = standard_metrics(&map(2, 3, gt.values().iter().map(|v| v * 1.2).collect()), &gt).unwrap();
    c.check("metrics 1.2 x gt", close(m.rel, 0.2, 1e-12) && m.delta1 == 1.0);
    let pred = map(2, 3, gt.values().iter().map(|v| v * 2.0).collect());
    let m = standard_metrics(&pred, &gt).unwrap();
    let frac = |k: i32| {
        let t = 1.25f64.powi(k);
        pred.values().iter().zip(gt.values()).filter(|(y, g)| (*y / *g).max(*g / *y) < t).count() as f64 / 6.0
    };
    c.check("metrics 2 x gt thresholds", (m.delta1, m.delta2, m.delta3) == (frac(1), frac(2), frac(3)));
    c.check("metrics 2 x gt all zero", (m.delta1, m.delta2, m.delta3) == (0.0, 0.0, 0.0));

    let r = range(1.0, 11.0);
    let h = depth_histogram(&DepthMap::constant(4, 4, 1.0).unwrap(), &r, 10).unwrap();
    c.check("histogram constant at d_min", h.mass[0] == 1.0 && h.mass[1..].iter().all(|&m| m == 0.0));
    let two = map(1, 4, vec![2.5, 2.5, 7.5, 7.5]);
    let h = depth_histogram(&two, &r, 10).unwrap();
    c.check("histogram two values", h.mass[1] == 0.5 && h.mass[6] == 0.5 && h.mass.iter().sum::<f64>() == 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rand_map = map(16, 16, uniform_vec(&mut rng, 256, 0.5, 12.0));
    let h = depth_histogram(&rand_map, &r, 37).unwrap();
    let edges = histogram_edges(&r, 37);
    let mut counts = vec![0usize; 37];
    for &d in rand_map.values() {
        let mut bin = None;
        for k in 0..37 {
            let last = k == 36;
            if (d >= edges[k] || k == 0) && (d < edges[k + 1] || last) {
                bin = Some(k);
                break;
            }
        }
        counts[bin.unwrap()] += 1;
    }
    let oracle: Vec<f64> = counts.iter().map(|&n| n as f64 / 256.0).collect();
    c.check("histogram brute force", h.mass == oracle);

    let r = range(0.0, 10.0);
    let d = drift_report(&gt, &gt, &r, 100).unwrap();
    c.check("drift identity", d.histogram_distance == 0.0 && d.range_deviation == 0.0);
    let gt = map(1, 6, vec![0.5, 1.5, 1.5, 3.5, 6.5, 8.5]);
    let shifted = map(1, 6, gt.values().iter().map(|v| v + 1.0).collect());
    let d = drift_report(&shifted, &gt, &r, 10).unwrap();
    let bin_counts = |m: &DepthMap<f64>| {
        let mut c = [0.0f64; 10];
        for &v in m.values() {
            c[v.floor() as usize] += 1.0 / 6.0;
        }
        c
    };
    let (hp, hg) = (bin_counts(&shifted), bin_counts(&gt));
    let tv = 0.5 * hp.iter().zip(&hg).map(|(a, b)| (a - b).abs()).sum::<f64>();
    c.check("drift shift deviation", close(d.range_deviation, 2.0, 1e-12));
    c.check("drift shift distance", close(d.histogram_distance, tv, 1e-12));
    let lo = map(1, 4, vec![1.0, 1.5, 2.0, 2.5]);
    let hi = map(1, 4, vec![7.0, 8.0, 8.5, 9.0]);
    c.check("drift disjoint", drift_report(&hi, &lo, &r, 100).unwrap().histogram_distance == 1.0);

    c.check("error map identity", error_map(&gt, &gt).unwrap().iter().all(|&e| e == 0.0));
    let plus = map(1, 6, gt.values().iter().map(|v| v + 0.5).collect());
    c.check("error map +0.5", error_map(&plus, &gt).unwrap().iter().all(|&e| close(e, 0.5, 1e-15)));
    let (a, b) = (map(8, 8, uniform_vec(&mut rng, 64, 0.1, 9.0)), map(8, 8, uniform_vec(&mut rng, 64, 0.1, 9.0)));
    let sub: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect();
    c.check("error map subtraction", error_map(&a, &b).unwrap() == sub);
}

fn data_examples(c: &mut Criterion, dir: &Path) {
    let cfg = SyntheticConfig::default();
    let a: SceneSample<f64> = generate_scene(42, &cfg).unwrap();
    let b: SceneSample<f64> = generate_scene(42, &cfg).unwrap();
    let bits = |s: &SceneSample<f64>| -> Vec<u64> {
        s.image.data().iter().chain(s.depth.values()).map(|v| v.to_bits()).collect()
    };
    c.check("generator determinism", bits(&a) == bits(&b) && a.meta == b.meta);
    let plane_cfg = SyntheticConfig { min_objects: 0, max_objects: 0, ..cfg.clone() };
    let plane: SceneSample<f64> = generate_scene(3, &plane_cfg).unwrap();
    let (lo, hi) = plane.depth.valid_min_max().unwrap();
    let ends_ok = match &plane.meta {
        SceneMeta::Synthetic { near, far, objects, .. } => objects.is_empty() && lo == *near && hi == *far,
        SceneMeta::File { .. } => false,
    };
    c.check("zero objects is the plane", ends_ok);
    let r = range(cfg.d_min, cfg.d_max);
    let in_range = (0..1000u64).all(|seed| {
        let s: SceneSample<f64> = generate_scene(seed, &cfg).unwrap();
        let ok = s.depth.valid_values().all(|d| d > r.d_min() && d <= r.d_max());
        ok
    });
    c.check("1000 scenes within range", in_range);

    let rgb = dir.join("rgb.png");
    let depth = dir.join("depth.png");
    write_rgb_png(&RgbImage::<f64>::new(1, 2, vec![0.2; 6]).unwrap(), &rgb).unwrap();
    image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(2, 1, vec![5000, 0]).unwrap().save(&depth).unwrap();
    let manifest = DatasetManifest { entries: vec![(rgb, depth)], scale: 1e-3, range: r };
    let path = dir.join("manifest.txt");
    write_manifest(&path, &manifest).unwrap();
    let loaded = load_manifest(&path).unwrap();
    let s: SceneSample<f64> = read_sample(&loaded, 0).unwrap();
    c.check("png 5000 at scale 1/1000", s.depth.is_valid(0, 0) && close(s.depth.get(0, 0), 5.0, 1e-12));
    c.check("zero depth masked", !s.depth.is_valid(0, 1));

    let (rgb, depth) = write_sample(&a, dir, "trip", 1e-3).unwrap();
    let m = DatasetManifest { entries: vec![(dir.join(rgb), dir.join(depth))], scale: 1e-3, range: r };
    let back: SceneSample<f64> = read_sample(&m, 0).unwrap();
    let ok = back.depth.values().iter().zip(a.depth.values()).all(|(x, y)| (x - y).abs() <= 0.5e-3 + 1e-12);
    c.check("write/read round trip within scale/2", ok);

    let flip = AugmentParams { flip: true, gains: [1.0; 3] };
    let twice = apply_augment(&apply_augment(&a, &flip), &flip);
    c.check("flip twice", twice == a);
    c.check("identity augmentation", apply_augment(&a, &AugmentParams::IDENTITY) == a);
    let f = apply_augment(&a, &flip);
    let ha = depth_histogram(&a.depth, &r, 100).unwrap();
    let hf = depth_histogram(&f.depth, &r, 100).unwrap();
    c.check("flip preserves depth histogram", ha == hf);
}

fn trainer_examples(c: &mut Criterion, dir: &Path) {
    let header = TrainConfig::default().header().join("\n");
    for needle in [
        "beta1=0.9 beta2=0.999",
        "weight_decay=0.0001",
        "learning rate: 0.0002 x0.9 every 5 epochs",
        "batch size: 24",
        "stage local: epochs=10 alpha=10 beta=0.1 gamma=0 u=0.85 lambda=zero",
        "stage global: epochs=10 alpha=10 beta=0.1 gamma=0.1 u=0.85 lambda=depth_related v=1",
    ] {
        c.check(format!("header echoes '{needle}'"), header.contains(needle));
    }

    let mut cfg = tiny_train_config();
    let data: Vec<SceneSample<f32>> = load_dataset(&cfg.dataset, &cfg.network).unwrap();
    cfg.local.epochs = 0;
    cfg.global.epochs = 0;
    let (ckpt, log) = train(cfg.clone(), &data).unwrap();
    let fresh = DaNet::<f32>::new(cfg.network.clone(), cfg.seed).unwrap();
    c.check("zero epochs", log.steps.is_empty() && ckpt.network().unwrap() == fresh);

    let cfg = tiny_train_config();
    let (_, l1) = train(cfg.clone(), &data).unwrap();
    let (_, l2) = train(cfg.clone(), &data).unwrap();
    c.check("seeded loss curves identical", !l1.steps.is_empty() && l1 == l2);

    c.note("overfit RMS on the training set is checked by the overfit-and-align criterion");
    let net = DaNet::<f32>::new(cfg.network.clone(), 1).unwrap();
    let rep = evaluate(&net, &data, 100, EvalOptions { passthrough: true }).unwrap();
    let m = rep.mean;
    c.check(
        "passthrough evaluation",
        m.histogram_distance == 0.0 && m.range_deviation == 0.0 && [m.metrics.rel, m.metrics.rms, m.metrics.log10] == [0.0; 3],
    );
    let base = DaNet::<f32>::new(NetworkConfig { use_pst: false, ..cfg.network.clone() }, 1).unwrap();
    let rep_base = evaluate(&base, &data, 100, EvalOptions::default()).unwrap();
    let rep_pst = evaluate(&net, &data, 100, EvalOptions::default()).unwrap();
    c.check(
        "use_pst toggles reported parameter count",
        rep_base.num_parameters == enumerate_parameters(base.config())
            && rep_pst.num_parameters == enumerate_parameters(net.config())
            && rep_base.num_parameters != rep_pst.num_parameters,
    );

    let d = diagnose(&net, &data[0], &dir.join("pass"), 100, EvalOptions { passthrough: true }).unwrap();
    let white = image::open(&d.error_png).unwrap().to_rgb8().pixels().all(|p| p.0 == [255, 255, 255]);
    c.check("passthrough error map is zero", white && d.report.range_deviation == 0.0);
    let d = diagnose(&net, &data[0], &dir.join("net"), 100, EvalOptions::default()).unwrap();
    let csv = std::fs::read_to_string(&d.histogram_csv).unwrap();
    c.check("histogram csv has K rows", csv.lines().count() == 1 + 100);
    let pred = net.predict(&data[0].image).unwrap().depth;
    let direct = drift_report(&pred, &data[0].depth, &net.config().range(), 100).unwrap();
    c.check("diagnose report equals drift_report", d.report == direct);
}

#[test]
fn criterion_1_formula_oracles() {
    let mut c = Criterion::new("criterion 1 (formula oracle suite)");
    let dir = tempfile::tempdir().unwrap();
    core_examples(&mut c);
    pst_examples(&mut c);
    network_examples(&mut c);
    loss_examples(&mut c);
    metric_examples(&mut c);
    data_examples(&mut c, dir.path());
    trainer_examples(&mut c, dir.path());
    c.finish(60.0);
}

#[test]
fn criterion_2_aec_geometry_exhaustive() {
    let mut c = Criterion::new("criterion 2 (AEC geometry, exhaustive)");
    let mut cases = 0u64;
    let mut bad = 0u64;
    for in_h in 1..=64 {
        for out_h in 1..=in_h {
            for in_w in 1..=64 {
                for out_w in 1..=in_w {
                    cases += 1;
                    let g = compute_aec_geometry(in_h, in_w, out_h, out_w).unwrap();
                    let ok = g.kernel_h >= 1
                        && g.kernel_w >= 1
                        && g.stride_y >= 1
                        && g.stride_x >= 1
                        && sliding_window(&g) == (out_h, out_w)
                        && (out_h - 1) * g.stride_y + g.kernel_h <= in_h
                        && (out_w - 1) * g.stride_x + g.kernel_w <= in_w;
                    if !ok {
                        bad += 1;
                    }
                }
            }
        }
    }
    c.note(format!("exhaustive over every 1 <= out <= in <= 64 per axis: {cases} cases"));
    c.check(format!("{bad} geometries failed"), bad == 0);
    c.check("case count", cases == 2080 * 2080);
    c.check("out > in rejected", compute_aec_geometry(4, 4, 5, 4).is_err() && compute_aec_geometry(4, 4, 4, 5).is_err());
    c.finish(300.0);
}

/// Central differences of `f` at `x`, one coordinate at a time.
fn numeric_gradient(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            p[i] += h;
            let up = f(&p);
            p[i] -= 2.0 * h;
            (up - f(&p)) / (2.0 * h)
        })
        .collect()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Total loss of `net` on `sample` under `stage`, evaluated in 64-bit.
fn total_loss_f64(net: &DaNet<f64>, sample: &SceneSample<f64>, stage: &StageConfig) -> f64 {
    let p = net.predict(&sample.image).unwrap();
    total_loss(&p.depth, &sample.depth, p.bins.centers(), stage).unwrap().total
}

/// Random direction over `k` random scalar parameters.
fn random_direction(net: &DaNet<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<(String, usize, f64)> {
    let names: Vec<(String, usize)> = net.params().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    (0..k)
        .map(|_| {
            let (name, len) = &names[rng.gen_range(0..names.len())];
            (name.clone(), rng.gen_range(0..*len), rng.gen_range(-1.0..1.0))
        })
        .collect()
}

fn shifted(net: &DaNet<f64>, dir: &[(String, usize, f64)], h: f64) -> DaNet<f64> {
    let mut out = net.clone();
    for (name, i, v) in dir {
        out.params_mut().get_mut(name).unwrap().data_mut()[*i] += h * v;
    }
    out
}

#[test]
fn criterion_3_gradient_correctness() {
    let mut c = Criterion::new("criterion 3 (gradient correctness)");
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 5];

    for point in 0..10 {
        let (h, w) = (6, 7);
        let gt = map(h, w, uniform_vec(&mut rng, h * w, 0.5, 10.0));
        let pred = uniform_vec(&mut rng, h * w, 0.5, 10.0);
        let weights = depth_related_weights(&gt, 1.0);
        let f = |p: &[f64]| ssi_loss(&map(h, w, p.to_vec()), &gt, Some(&weights), 0.85).unwrap();
        let (_, analytic) = ssi_loss_with_grad(&map(h, w, pred.clone()), &gt, Some(&weights), 0.85).unwrap();
        let e = relative_error(&analytic, &numeric_gradient(&pred, 1e-6, f));
        worst[0] = worst[0].max(e);
        c.check(format!("L_pixel point {point}: {e:.2e}"), e < 1e-5);

        // Centers kept well away from ties with each other and with the points.
        let gt = map(h, w, uniform_vec(&mut rng, h * w, 0.5, 10.0));
        let mut cs = uniform_vec(&mut rng, 8, 0.2, 10.5);
        cs.sort_by(f64::total_cmp);
        let f = |x: &[f64]| chamfer_bin_loss(x, &gt).unwrap();
        let (_, analytic) = chamfer_bin_loss_with_grad(&cs, &gt).unwrap();
        let e = relative_error(&analytic, &numeric_gradient(&cs, 1e-7, f));
        worst[1] = worst[1].max(e);
        c.check(format!("L_bin point {point}: {e:.2e}"), e < 1e-5);

        let (lo, hi) = gt.valid_min_max().unwrap();
        let mut cs = uniform_vec(&mut rng, 6, 0.1, 10.5);
        cs.sort_by(f64::total_cmp);
        cs[0] = lo + if rng.gen_bool(0.5) { 0.3 } else { -0.3 };
        cs[5] = hi + if rng.gen_bool(0.5) { 0.3 } else { -0.3 };
        let f = |x: &[f64]| minmax_loss(x, &gt).unwrap();
        let (_, analytic) = minmax_loss_with_grad(&cs, &gt).unwrap();
        let e = relative_error(&analytic, &numeric_gradient(&cs, 1e-6, f));
        worst[2] = worst[2].max(e);
        c.check(format!("L_minmax point {point}: {e:.2e}"), e < 1e-5);
    }

    // End to end through the whole network, along random parameter directions.
    let stage = StageConfig::global();
    let net_cfg = NetworkConfig { num_bins: 16, ..NetworkConfig::default() };
    let scene_cfg = SyntheticConfig::default();
    for point in 0..10u64 {
        let net = DaNet::<f64>::new(net_cfg.clone(), 100 + point).unwrap();
        let sample: SceneSample<f64> = generate_scene(200 + point, &scene_cfg).unwrap();
        let dir = random_direction(&net, 24, &mut rng);
        let directional = |grads: &std::collections::BTreeMap<String, Tensor<f64>>| -> f64 {
            dir.iter().map(|(n, i, v)| grads[n].data()[*i] * v).sum()
        };
        let numeric = |net: &DaNet<f64>, h: f64| {
            (total_loss_f64(&shifted(net, &dir, h), &sample, &stage) - total_loss_f64(&shifted(net, &dir, -h), &sample, &stage))
                / (2.0 * h)
        };

        let analytic = directional(&sample_gradient(&net, &sample, &stage).unwrap().grads);
        let fd = numeric(&net, 1e-6);
        let e = (analytic - fd).abs() / analytic.abs().max(fd.abs());
        worst[3] = worst[3].max(e);
        c.check(format!("end-to-end f64 point {point}: {e:.2e}"), e < 1e-5);

        // 32-bit analytic gradient against a 64-bit reference at the same point.
        let net32: DaNet<f32> = net.cast();
        let at32: DaNet<f64> = net32.cast();
        let sample32 = SceneSample { image: sample.image.cast(), depth: sample.depth.cast(), meta: sample.meta.clone() };
        let g32 = sample_gradient(&net32, &sample32, &stage).unwrap().grads;
        let g32: std::collections::BTreeMap<String, Tensor<f64>> = g32.into_iter().map(|(k, t)| (k, t.cast())).collect();
        let analytic = directional(&g32);
        let fd = numeric(&at32, 1e-6);
        let e = (analytic - fd).abs() / analytic.abs().max(fd.abs());
        worst[4] = worst[4].max(e);
        c.check(format!("end-to-end f32 point {point}: {e:.2e}"), e < 1e-3);
    }
    c.note(format!(
        "worst relative errors: pixel {:.1e}, bin {:.1e}, minmax {:.1e}, end-to-end f64 {:.1e}, f32 {:.1e}",
        worst[0], worst[1], worst[2], worst[3], worst[4]
    ));
    c.finish(300.0);
}

#[test]
fn criterion_4_invariants() {
    let mut c = Criterion::new("criterion 4 (invariant fuzz)");
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut ssi_bad, mut delta_bad, mut bound_bad, mut width_bad, mut center_bad, mut homog_bad) = (0, 0, 0, 0, 0, 0);
    for _ in 0..10_000 {
        let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let gt = map(h, w, uniform_vec(&mut rng, h * w, 0.05, 20.0));
        let pred = map(h, w, uniform_vec(&mut rng, h * w, 0.05, 20.0));
        let k = rng.gen_range(0.01..100.0);
        let scaled = map(h, w, pred.values().iter().map(|v| v * k).collect());
        let a = ssi_loss(&pred, &gt, None, 1.0).unwrap();
        let b = ssi_loss(&scaled, &gt, None, 1.0).unwrap();
        if !close(a, b, 1e-9 * a.max(1.0)) {
            ssi_bad += 1;
        }

        let m = standard_metrics(&pred, &gt).unwrap();
        if !(m.delta1 <= m.delta2 && m.delta2 <= m.delta3) {
            delta_bad += 1;
        }

        let bins = rng.gen_range(1..12);
        let mut cs = uniform_vec(&mut rng, bins, 0.1, 10.0);
        cs.sort_by(f64::total_cmp);
        let probs: Vec<f64> = {
            let raw = uniform_vec(&mut rng, bins * h * w, 0.0, 1.0);
            let plane = h * w;
            let mut p = raw.clone();
            for px in 0..plane {
                let s: f64 = (0..bins).map(|n| raw[n * plane + px]).sum();
                for n in 0..bins {
                    p[n * plane + px] = raw[n * plane + px] / s;
                }
            }
            p
        };
        let y = combine(&BinProbabilityMap::new(h, w, bins, probs).unwrap(), &cs).unwrap();
        let tol = 1e-12 * cs[bins - 1];
        if !y.values().iter().all(|&v| v >= cs[0] - tol && v <= cs[bins - 1] + tol) {
            bound_bad += 1;
        }

        let n = rng.gen_range(1..=256);
        let scale = 10f64.powi(rng.gen_range(-3..4));
        let raw: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..scale) }).collect();
        let tau = 10f64.powf(rng.gen_range(-6.0..0.0));
        let b = normalize_bin_widths(&raw, tau).unwrap();
        if !(close(b.iter().sum::<f64>(), 1.0, 1e-9) && b.iter().all(|&x| x > 0.0)) {
            width_bad += 1;
        }
        let lo = rng.gen_range(0.0..5.0);
        let r = range(lo, lo + rng.gen_range(0.5..50.0));
        let cs = bin_centers(&b, &r).unwrap();
        let inside = cs.iter().all(|&x| x > r.d_min() && x < r.d_max());
        if !(inside && cs.windows(2).all(|p| p[0] < p[1])) {
            center_bad += 1;
        }
        let k = 10f64.powf(rng.gen_range(-2.0..2.0));
        let bk = normalize_bin_widths(&raw.iter().map(|x| x * k).collect::<Vec<_>>(), tau * k).unwrap();
        if !b.iter().zip(&bk).all(|(x, y)| close(*x, *y, 1e-12 * x.max(1e-300).max(*y) + 1e-300)) {
            homog_bad += 1;
        }
    }
    c.check(format!("SSI scale invariance at u = 1 ({ssi_bad} violations)"), ssi_bad == 0);
    c.check(format!("delta nesting ({delta_bad} violations)"), delta_bad == 0);
    c.check(format!("combine bounds ({bound_bad} violations)"), bound_bad == 0);
    c.check(format!("width normalization ({width_bad} violations)"), width_bad == 0);
    c.check(format!("center monotonicity ({center_bad} violations)"), center_bad == 0);
    c.check(format!("width homogeneity ({homog_bad} violations)"), homog_bad == 0);

    // Network depth bounds on random inputs and weights.
    for seed in 0..8u64 {
        let cfg = NetworkConfig {
            backbone_channels: [4, 6, 8, 8, 16],
            num_bins: 1 + seed as usize * 3,
            embed_dim: 8,
            heads: 2,
            use_pst: seed % 4 != 3,
            ..NetworkConfig::default()
        };
        let net = DaNet::<f32>::new(cfg, seed).unwrap();
        let p = net.predict(&random_image(64, 64, seed).cast()).unwrap();
        let cs = p.bins.centers();
        let (lo, hi) = (cs[0], cs[cs.len() - 1]);
        let tol = 1e-6 * hi;
        let ok = p.depth.values().iter().all(|&d| d >= lo - tol && d <= hi + tol);
        c.check(format!("network depth within [c_1, c_Nb], seed {seed}"), ok);
    }
    c.finish(120.0);
}

/// 20 scenes, batch 4: 5 steps per epoch, so 60 epochs are 300 steps per stage.
fn overfit_config(lgo: bool) -> TrainConfig {
    let epochs = 60;
    TrainConfig {
        seed: 7,
        batch_size: 4,
        augment: false,
        local: StageSchedule { epochs, loss: StageConfig::local() },
        global: StageSchedule { epochs, loss: if lgo { StageConfig::global() } else { StageConfig::local() } },
        optimizer: OptimizerConfig { lr: 1e-3, ..OptimizerConfig::default() },
        network: NetworkConfig { num_bins: 16, embed_dim: 32, ..NetworkConfig::default() },
        dataset: DatasetSource::Synthetic { count: 20, seed: 11, min_objects: 2, max_objects: 8 },
    }
}

struct OverfitRun {
    report: EvalReport,
    log: TrainLog,
}

fn run_overfit(lgo: bool) -> OverfitRun {
    let cfg = overfit_config(lgo);
    let data: Vec<SceneSample<f32>> = load_dataset(&cfg.dataset, &cfg.network).unwrap();
    let (ckpt, log) = train(cfg, &data).unwrap();
    let report = evaluate(&ckpt.network().unwrap(), &data, 100, EvalOptions::default()).unwrap();
    OverfitRun { report, log }
}

fn overfit_runs() -> &'static (OverfitRun, OverfitRun) {
    static RUNS: OnceLock<(OverfitRun, OverfitRun)> = OnceLock::new();
    RUNS.get_or_init(|| {
        std::thread::scope(|s| {
            let a = s.spawn(|| run_overfit(false));
            let b = s.spawn(|| run_overfit(true));
            (a.join().unwrap(), b.join().unwrap())
        })
    })
}

#[test]
fn criterion_5_overfit_and_align() {
    let mut c = Criterion::new("criterion 5 (overfit-and-align experiment)");
    let (a, b) = overfit_runs();
    let steps = |r: &OverfitRun, global: bool| {
        r.log.steps.iter().filter(|s| (s.stage == danet::train::Stage::Global) == global).count()
    };
    c.check("300 steps per stage", [steps(a, false), steps(a, true), steps(b, false), steps(b, true)] == [300; 4]);
    let (ma, mb) = (&a.report.mean, &b.report.mean);
    for (name, m) in [("(a) local only", ma), ("(b) local + global", mb)] {
        c.note(format!(
            "{name}: rms={:.4} delta1={:.4} range_deviation={:.4} histogram_distance={:.4}",
            m.metrics.rms, m.metrics.delta1, m.range_deviation, m.histogram_distance
        ));
    }
    let improvement = 1.0 - mb.range_deviation / ma.range_deviation;
    c.note(format!("range deviation improvement of (b) over (a): {:.1}%", 100.0 * improvement));
    c.check(format!("rms of (b) {:.4} < 0.5", mb.metrics.rms), mb.metrics.rms < 0.5);
    c.check(format!("range deviation improvement {:.1}% >= 20%", 100.0 * improvement), improvement >= 0.2);
    c.check(
        format!("delta1 of (b) {:.4} >= delta1 of (a) {:.4}", mb.metrics.delta1, ma.metrics.delta1),
        mb.metrics.delta1 >= ma.metrics.delta1,
    );
    // Both runs execute concurrently inside the shared fixture.
    c.finish(900.0);
}

#[test]
fn criterion_6_ablation_parameter_ordering() {
    let mut c = Criterion::new("criterion 6 (ablation parameter ordering)");
    let pst = DaNet::<f32>::new(NetworkConfig::default(), 0).unwrap();
    let base = DaNet::<f32>::new(NetworkConfig { use_pst: false, ..NetworkConfig::default() }, 0).unwrap();
    c.note(format!("baseline {} < baseline + PST {}", base.num_parameters(), pst.num_parameters()));
    c.check("baseline has fewer parameters", base.num_parameters() < pst.num_parameters());
    c.check(
        "counts match enumeration",
        base.num_parameters() == enumerate_parameters(base.config())
            && pst.num_parameters() == enumerate_parameters(pst.config()),
    );
    c.finish(60.0);
}

#[test]
fn criterion_7_determinism() {
    let mut c = Criterion::new("criterion 7 (determinism)");
    let fresh = run_overfit(true);
    let (_, b) = overfit_runs();
    c.check("identical final metrics", fresh.report.mean.to_kv() == b.report.mean.to_kv());
    c.check("identical per-sample metrics", fresh.report.samples == b.report.samples);
    c.check("identical step logs", fresh.log == b.log);
    c.finish(900.0);
}
