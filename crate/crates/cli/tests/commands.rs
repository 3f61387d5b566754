//! Command-level integration tests over temp directories.

use std::fs;
use std::path::Path;

use vnsa_cli::commands::{cmd_attend, cmd_gates, cmd_gen, cmd_sinks};
use vnsa_cli::config::parse_config;
use vnsa_core::io::{read_tensor, write_tensor};
use vnsa_core::tensor::Tensor;

fn cfg_text(dir: &Path, extra: &str) -> String {
    format!(
        "heads = 4\nkv_heads = 2\nhead_dim = 8\nblock_size = 4\nselect_blocks = 2\nwindow = 8\n\
         seq_len = 32\nseed = 11\nfixtures_dir = {}/fixtures\nout_dir = {}/out\n{extra}",
        dir.display(),
        dir.display()
    )
}

#[test]
fn gen_is_seed_deterministic_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&cfg_text(dir.path(), "")).unwrap();
    cmd_gen(&cfg).unwrap();
    let first: Vec<(String, Vec<u8>)> = files_of(&cfg.fixtures_dir);
    cmd_gen(&cfg).unwrap();
    assert_eq!(first, files_of(&cfg.fixtures_dir), "same seed must be byte-identical");

    let other = parse_config(&cfg_text(dir.path(), "seed = 12\n")).unwrap();
    cmd_gen(&other).unwrap();
    for (name, bytes) in files_of(&other.fixtures_dir) {
        if name == "spans.vnsa" {
            continue;
        }
        let old = first.iter().find(|(n, _)| *n == name).unwrap();
        assert_ne!(old.1, bytes, "{name} must change with the seed");
    }
}

#[test]
fn fixture_headers_carry_the_magic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&cfg_text(dir.path(), "")).unwrap();
    cmd_gen(&cfg).unwrap();
    for (name, bytes) in files_of(&cfg.fixtures_dir) {
        assert_eq!(&bytes[..5], &[0x56, 0x4E, 0x53, 0x41, 0x01], "{name}");
    }
}

#[test]
fn all_text_attend_equals_the_dense_command_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&cfg_text(dir.path(), "vision_spans = none\n")).unwrap();
    cmd_gen(&cfg).unwrap();
    cmd_attend(&cfg, false).unwrap();
    let nsa = fs::read(cfg.out_dir.join("attend_out.vnsa")).unwrap();
    cmd_attend(&cfg, true).unwrap();
    let dense = fs::read(cfg.out_dir.join("attend_out.vnsa")).unwrap();
    assert_eq!(nsa, dense);
}

#[test]
fn full_budget_window_gate_stays_within_dense_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "select_blocks = 8\nwindow = 32\ngate_override = 0,0,1\n";
    let cfg = parse_config(&cfg_text(dir.path(), extra)).unwrap();
    cmd_gen(&cfg).unwrap();
    cmd_attend(&cfg, false).unwrap();
    let summary = fs::read_to_string(cfg.out_dir.join("attend_summary.csv")).unwrap();
    let dev: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("max_abs_dev_vs_dense,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!(dev <= 1e-5, "max deviation {dev}");
}

#[test]
fn attend_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&cfg_text(dir.path(), "")).unwrap();
    cmd_gen(&cfg).unwrap();
    cmd_attend(&cfg, false).unwrap();
    let first = files_of(&cfg.out_dir);
    cmd_attend(&cfg, false).unwrap();
    assert_eq!(first, files_of(&cfg.out_dir));
}

#[test]
fn uniform_attention_with_equal_norms_has_no_sinks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&cfg_text(dir.path(), "")).unwrap();
    fs::create_dir_all(&cfg.fixtures_dir).unwrap();
    let l = 32;
    // Zero keys give uniform attention; one-hot values all share norm 1.
    let q = Tensor::new(vec![4, l, 8], vec![0.1; 4 * l * 8]).unwrap();
    let k = Tensor::zeros(vec![2, l, 8]).unwrap();
    let mut v_data = vec![0.0f32; 2 * l * 8];
    for g in 0..2 {
        for t in 0..l {
            v_data[(g * l + t) * 8 + t % 8] = 1.0;
        }
    }
    let v = Tensor::new(vec![2, l, 8], v_data).unwrap();
    write_tensor(cfg.fixtures_dir.join("q.vnsa"), &q).unwrap();
    write_tensor(cfg.fixtures_dir.join("k.vnsa"), &k).unwrap();
    write_tensor(cfg.fixtures_dir.join("v.vnsa"), &v).unwrap();
    cmd_sinks(&cfg).unwrap();
    let csv = fs::read_to_string(cfg.out_dir.join("sinks_dense.csv")).unwrap();
    assert!(!csv.contains("true"), "no sink may be flagged:\n{csv}");
}

#[test]
fn planted_sink_is_flagged_in_the_dense_source() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&cfg_text(dir.path(), "kv_heads = 4\n")).unwrap();
    fs::create_dir_all(&cfg.fixtures_dir).unwrap();
    let l = 32;
    // Every query points at token 1's key; token 1 also has a tiny value norm.
    let q = Tensor::new(vec![4, l, 8], vec![1.0; 4 * l * 8]).unwrap();
    let mut k_data = vec![0.0f32; 4 * l * 8];
    let mut v_data = vec![0.0f32; 4 * l * 8];
    for g in 0..4 {
        for j in 0..8 {
            k_data[(g * l) * 8 + j] = 3.0;
        }
        for t in 0..l {
            let norm = if t == 0 { 0.01 } else { 10.0 };
            v_data[(g * l + t) * 8] = norm;
        }
    }
    write_tensor(cfg.fixtures_dir.join("q.vnsa"), &q).unwrap();
    write_tensor(
        cfg.fixtures_dir.join("k.vnsa"),
        &Tensor::new(vec![4, l, 8], k_data).unwrap(),
    )
    .unwrap();
    write_tensor(
        cfg.fixtures_dir.join("v.vnsa"),
        &Tensor::new(vec![4, l, 8], v_data).unwrap(),
    )
    .unwrap();
    cmd_sinks(&cfg).unwrap();
    let csv = fs::read_to_string(cfg.out_dir.join("sinks_dense.csv")).unwrap();
    let flagged: Vec<usize> = csv
        .lines()
        .skip(1)
        .filter(|l| l.ends_with("true"))
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(flagged, vec![1], "exactly the planted token:\n{csv}");

    for source in ["dense", "cmp", "slc", "win"] {
        let csv = fs::read_to_string(cfg.out_dir.join(format!("sinks_{source}.csv"))).unwrap();
        for line in csv.lines().skip(1) {
            let alpha: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
            assert!((0.0..=1.0).contains(&alpha), "{source}: {line}");
        }
    }
}

#[test]
fn zero_gate_parameters_give_flat_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&cfg_text(dir.path(), "")).unwrap();
    cmd_gen(&cfg).unwrap();
    let d_in = cfg.hidden_width();
    write_tensor(
        cfg.fixtures_dir.join("W1.vnsa"),
        &Tensor::zeros(vec![d_in, d_in]).unwrap(),
    )
    .unwrap();
    write_tensor(
        cfg.fixtures_dir.join("b1.vnsa"),
        &Tensor::zeros(vec![d_in]).unwrap(),
    )
    .unwrap();
    write_tensor(
        cfg.fixtures_dir.join("W2.vnsa"),
        &Tensor::zeros(vec![d_in, 3 * cfg.heads]).unwrap(),
    )
    .unwrap();
    write_tensor(
        cfg.fixtures_dir.join("b2.vnsa"),
        &Tensor::zeros(vec![3 * cfg.heads]).unwrap(),
    )
    .unwrap();
    cmd_gates(&cfg).unwrap();
    let csv = fs::read_to_string(cfg.out_dir.join("gate_stats.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[2].parse::<f64>().unwrap(), 0.5);
        assert_eq!(cols[3].parse::<f64>().unwrap(), 0.0);
        assert_eq!(cols[4].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn identical_head_gates_correlate_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&cfg_text(dir.path(), "")).unwrap();
    cmd_gen(&cfg).unwrap();
    let d_in = cfg.hidden_width();
    // W1 = I keeps the hidden layer input-dependent; W2 columns repeat per
    // head so every head sees the same per-branch gate series.
    let mut w1 = vec![0.0f32; d_in * d_in];
    for i in 0..d_in {
        w1[i * d_in + i] = 1.0;
    }
    write_tensor(
        cfg.fixtures_dir.join("W1.vnsa"),
        &Tensor::new(vec![d_in, d_in], w1).unwrap(),
    )
    .unwrap();
    write_tensor(
        cfg.fixtures_dir.join("b1.vnsa"),
        &Tensor::new(vec![d_in], vec![0.1; d_in]).unwrap(),
    )
    .unwrap();
    let out_w = 3 * cfg.heads;
    let mut w2 = vec![0.0f32; d_in * out_w];
    for i in 0..d_in {
        for head in 0..cfg.heads {
            for branch in 0..3 {
                let weight = ((i + branch) % 5) as f32 * 0.2 - 0.4;
                w2[i * out_w + head * 3 + branch] = weight;
            }
        }
    }
    write_tensor(
        cfg.fixtures_dir.join("W2.vnsa"),
        &Tensor::new(vec![d_in, out_w], w2).unwrap(),
    )
    .unwrap();
    write_tensor(
        cfg.fixtures_dir.join("b2.vnsa"),
        &Tensor::zeros(vec![out_w]).unwrap(),
    )
    .unwrap();
    cmd_gates(&cfg).unwrap();
    let csv = fs::read_to_string(cfg.out_dir.join("gate_stats.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let corr: f64 = line.split(',').nth(4).unwrap().parse().unwrap();
        assert!((corr - 1.0).abs() < 1e-9, "{line}");
    }
}

#[test]
fn mismatched_fixtures_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&cfg_text(dir.path(), "")).unwrap();
    cmd_gen(&cfg).unwrap();
    let wrong = parse_config(&cfg_text(dir.path(), "heads = 2\n")).unwrap();
    let err = cmd_attend(&wrong, false).unwrap_err();
    assert!(format!("{err:#}").contains("config/fixture mismatch"), "{err:#}");
}

#[test]
fn span_fixture_roundtrips_through_attend() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&cfg_text(dir.path(), "vision_spans = 1-8,17-24\n")).unwrap();
    cmd_gen(&cfg).unwrap();
    let spans = read_tensor(cfg.fixtures_dir.join("spans.vnsa")).unwrap();
    assert_eq!(spans.dims()[1], 3);
    cmd_attend(&cfg, false).unwrap();

    let other = parse_config(&cfg_text(dir.path(), "vision_spans = 1-8\n")).unwrap();
    let err = cmd_attend(&other, false).unwrap_err();
    assert!(format!("{err:#}").contains("config/fixture mismatch"));
}

#[test]
fn bench_csv_reports_equal_counts_and_quadratic_scoring_growth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(&cfg_text(dir.path(), "")).unwrap();
    vnsa_cli::commands::cmd_bench(&cfg, &[256, 512, 1024]).unwrap();
    let csv = fs::read_to_string(cfg.out_dir.join("cost.csv")).unwrap();
    assert!(csv.starts_with("L,branch,analytic_count,measured_count,wall_ns\n"));
    let mut slc = Vec::new();
    let mut win = Vec::new();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let analytic: u64 = cols[2].parse().unwrap();
        let measured: u64 = cols[3].parse().unwrap();
        assert_eq!(analytic, measured, "{line}");
        match cols[1] {
            "slc_scores" => slc.push(analytic as f64),
            "win_attended" => win.push(analytic as f64),
            _ => {}
        }
    }
    for pair in slc.windows(2) {
        let ratio = pair[1] / pair[0];
        assert!((3.5..=4.5).contains(&ratio), "slc ratio {ratio}");
    }
    // w = 8 << L here, so the window term is fully linear.
    for pair in win.windows(2) {
        let ratio = pair[1] / pair[0];
        assert!((1.9..=2.1).contains(&ratio), "win ratio {ratio}");
    }

    let err = vnsa_cli::commands::cmd_bench(&cfg, &[512, 256]).unwrap_err();
    assert!(err.to_string().contains("ascending"));
    let err = vnsa_cli::commands::cmd_bench(&cfg, &[2]).unwrap_err();
    assert!(err.to_string().contains("shorter than one block"));
}

#[test]
fn budget_prints_four_significant_digits() {
    let bin = env!("CARGO_BIN_EXE_vnsa");
    let cases = [
        (vec!["budget", "32", "64", "256", "128000"], "K_attn = 2304", "gamma = 3.600%"),
        (vec!["budget", "0", "64", "256", "1000"], "K_attn = 256", "gamma = 51.25%"),
        (
            vec!["budget", "32", "64", "256", "--frames", "512", "--tpf", "64"],
            "K_attn = 2304",
            "gamma = 14.06%",
        ),
    ];
    for (args, want_budget, want_gamma) in cases {
        let out = std::process::Command::new(bin).args(&args).output().unwrap();
        assert!(out.status.success());
        let stdout = String::from_utf8(out.stdout).unwrap();
        assert!(stdout.contains(want_budget), "{args:?}:\n{stdout}");
        assert!(stdout.contains(want_gamma), "{args:?}:\n{stdout}");
    }
}

#[test]
fn check_exit_codes_follow_the_suites() {
    let bin = env!("CARGO_BIN_EXE_vnsa");
    let ok = std::process::Command::new(bin).arg("check").output().unwrap();
    assert!(ok.status.success());
    let corrupted = std::process::Command::new(bin)
        .arg("check")
        .env("VNSA_CHECK_TOL_SCALE", "0")
        .output()
        .unwrap();
    assert!(!corrupted.status.success());
    let stdout = String::from_utf8(corrupted.stdout).unwrap();
    assert!(stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn check_suites_finish_well_under_a_minute() {
    let start = std::time::Instant::now();
    let results = vnsa_core::selfcheck::run_all(1.0);
    assert!(results.iter().all(|r| r.passed));
    assert!(start.elapsed().as_secs() < 60);
}

fn files_of(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}
