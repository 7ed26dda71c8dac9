use serde_json::Value;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

const SMALL: [&str; 10] = [
    "--model",
    "resnet18",
    "--classes",
    "10",
    "--input-size",
    "16",
    "--split",
    "SP-3",
    "--n-c",
    "64",
];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_splitwire"));
    c.env_remove("SPLITWIRE_DATA");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

#[test]
fn profile_reproduces_reference_budgets() {
    let o = run(&["--format", "csv", "profile", "--all-splits"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let sp2 = text.lines().find(|l| l.starts_with("SP-2,")).unwrap();
    let cells: Vec<&str> = sp2.split(',').collect();
    assert!((cells[2].parse::<f64>().unwrap() / 1e6 - 229.31).abs() < 0.005, "{sp2}");
    assert!((cells[5].parse::<f64>().unwrap() - 9.96).abs() < 0.005, "{sp2}");
    let vanilla = stdout(&run(&["--format", "csv", "profile"]));
    assert!(vanilla.lines().any(|l| l.starts_with("none,,1159448576,")), "{vanilla}");
}

#[test]
fn profile_rejects_conflicting_flags() {
    let o = run(&["profile", "--split", "SP-2", "--all-splits"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_split_is_a_usage_error() {
    let o = run(&["profile", "--split", "SP-9"]);
    assert_eq!(code(&o), 2);
    let o = run(&["simulate", "--n-c", "100"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn sweep_nc_reproduces_table_cells() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["--output-dir", out, "sweep", "--kind", "nc", "--table", "bundled", "--splits", "SP-2,SP-3,SP-4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("sweep_nc.csv")).unwrap();
    let cells: Vec<String> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            format!("{}@{}={}", f[0], f[1], f[3])
        })
        .collect();
    for want in [
        "SP-2@0=1024", "SP-3@0=64", "SP-4@0=32", "SP-2@3=512", "SP-3@3=32", "SP-4@3=32", "SP-2@5=512", "SP-3@5=32",
        "SP-4@5=16",
    ] {
        assert!(cells.iter().any(|c| c == want), "{want} missing from {cells:?}");
    }
}

#[test]
fn sweep_edge_cases_are_usage_errors() {
    assert_eq!(code(&run(&["sweep", "--kind", "beta", "--points", "0"])), 2);
    let o = run(&["sweep", "--kind", "nc"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--table"), "{}", stderr(&o));
    let o = run(&["sweep", "--kind", "nc", "--table", "bundled", "--table-model", "vgg"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn sweep_beta_writes_curves() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = run(&["--output-dir", out, "sweep", "--kind", "beta", "--betas", "0.001"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("sweep_beta.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    let sp2 = csv.lines().find(|l| l.contains("SP-2")).unwrap();
    let v: f64 = sp2.rsplit(',').next().unwrap().parse().unwrap();
    assert!((v - 0.1996).abs() < 1e-3, "{sp2}");
}

#[test]
fn simulate_is_deterministic_and_noiseless_matches_reference() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let mut args = vec!["--seed".to_string(), "5".into(), "--output-dir".into()];
        args.push(dir.path().to_str().unwrap().into());
        args.push("simulate".into());
        args.extend(with(&SMALL, &["--snr", "3"]));
        let o = bin().args(&args).output().unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for file in ["simulate.json", "z_hat.f32", "manifest.json"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between runs");
    }

    let o = bin().args(with(&["--format", "json", "simulate"], &SMALL)).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["sigma"], 0.0);
    assert_eq!(report["label"], report["reference_label"]);
    assert_eq!(report["payload_bits"], 64 * 32);
}

#[test]
fn different_snr_gives_different_z_hat() {
    let digest = |snr: &str| {
        let o = bin()
            .args(["--format", "json", "simulate", "--snr", snr])
            .args(SMALL)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert!(v["label"].as_u64().unwrap() < 10);
        v["z_hat_digest"].as_str().unwrap().to_string()
    };
    assert_ne!(digest("5"), digest("0"));
}

#[test]
fn manifest_hashes_match_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["--output-dir", dir.path().to_str().unwrap(), "simulate"])
        .args(SMALL)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = read_json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["command"], "simulate");
    let outputs = manifest["outputs"].as_array().unwrap();
    assert!(outputs.len() >= 2);
    for entry in outputs {
        let bytes = std::fs::read(dir.path().join(entry["file"].as_str().unwrap())).unwrap();
        use sha2::Digest;
        let hex: String = sha2::Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(entry["sha256"].as_str().unwrap(), hex);
        assert_eq!(entry["bytes"].as_u64().unwrap(), bytes.len() as u64);
    }
}

#[test]
fn raw_and_png_inputs_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("x.bin");
    let values: Vec<u8> = (0..3 * 16 * 16).flat_map(|i| ((i % 7) as f32 - 3.0).to_le_bytes()).collect();
    std::fs::write(&raw, values).unwrap();
    let o = bin()
        .args(["simulate", "--input", raw.to_str().unwrap()])
        .args(SMALL)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let png_path = dir.path().join("x.png");
    let file = std::fs::File::create(&png_path).unwrap();
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), 16, 16);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let pixels: Vec<u8> = (0..16 * 16 * 3).map(|i| (i * 37 % 256) as u8).collect();
    enc.write_header().unwrap().write_image_data(&pixels).unwrap();
    let o = bin()
        .args(["simulate", "--input", png_path.to_str().unwrap()])
        .args(SMALL)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    // wrong size: no resizing
    let o = bin()
        .args(["simulate", "--input", png_path.to_str().unwrap(), "--input-size", "32"])
        .args(&SMALL[..4])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let missing = dir.path().join("absent.bin");
    let o = bin()
        .args(["simulate", "--input", missing.to_str().unwrap()])
        .args(SMALL)
        .output()
        .unwrap();
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn plan_picks_reference_choice_and_reports_infeasible() {
    let link = [
        "plan", "--snr", "5", "--rate", "1e6", "--alpha-t", "1e-9", "--alpha-r", "1e-11",
    ];
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["--format", "json", "--output-dir", dir.path().to_str().unwrap()])
        .args(link)
        .args(["--floor", "0.66"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let plan = read_json(&dir.path().join("plan.json"));
    assert_eq!(plan["feasible"], true);
    assert!(dir.path().join("candidates.csv").exists());

    let o = bin().args(link).args(["--floor", "0.95"]).output().unwrap();
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let o = bin().args(link).args(["--floor", "0.66", "--table", "/nonexistent.csv"]).output().unwrap();
    assert_eq!(code(&o), 4);
}

#[test]
fn data_directory_override_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("paper_tables.csv"),
        "model,split,n_c,snr_db,top1\nresnet34,SP-3,8,0,0.9\n",
    )
    .unwrap();
    let o = bin()
        .env("SPLITWIRE_DATA", dir.path())
        .args(["--format", "csv", "sweep", "--kind", "nc", "--table", "bundled", "--splits", "SP-3", "--snr", "0"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l.starts_with("SP-3,") && l.ends_with(",8")), "{}", stdout(&o));
}

fn spawn_server(extra: &[&str]) -> (std::process::Child, String) {
    let mut child = bin()
        .args(["--seed", "3", "serve", "--addr", "127.0.0.1:0"])
        .args(SMALL)
        .args(extra)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("listening line").to_string();
    (child, addr)
}

#[test]
fn serve_and_send_agree_with_simulate() {
    let (mut server, addr) = spawn_server(&["--snr", "5", "--exit-after", "6"]);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let o = bin()
            .args(["--seed", "3", "--output-dir", dir.path().to_str().unwrap(), "send", "--addr", &addr])
            .args(["--count", "3"])
            .args(SMALL)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert!(server.wait().unwrap().success());

    let first = std::fs::read(a.path().join("transcript.csv")).unwrap();
    assert_eq!(first, std::fs::read(b.path().join("transcript.csv")).unwrap());
    assert!(a.path().join("timing.csv").exists());
    let manifest = read_json(&a.path().join("manifest.json"));
    let timing = manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["file"] == "timing.csv")
        .unwrap();
    assert_eq!(timing["deterministic"], false);

    // request 0 of send uses the same derived seeds as simulate
    let sim = bin()
        .args(["--seed", "3", "--format", "json", "simulate", "--snr", "5"])
        .args(SMALL)
        .output()
        .unwrap();
    assert_eq!(code(&sim), 0, "{}", stderr(&sim));
    let report: Value = serde_json::from_str(&stdout(&sim)).unwrap();
    let transcript = String::from_utf8(first).unwrap();
    let row0: Vec<&str> = transcript.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row0[1], report["label"].to_string());
    assert_eq!(row0[3], report["z_hat_digest"].as_str().unwrap());
}

#[test]
fn send_with_other_weights_is_a_protocol_error() {
    let (mut server, addr) = spawn_server(&["--exit-after", "1"]);
    let o = bin()
        .args(["--seed", "99", "send", "--addr", &addr])
        .args(SMALL)
        .output()
        .unwrap();
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    let _ = server.kill();
    let _ = server.wait();
}

#[test]
fn send_to_closed_port_is_an_io_error() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let o = bin().args(["send", "--addr", &addr]).args(SMALL).output().unwrap();
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn help_and_version_exit_cleanly() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["frobnicate"])), 2);
}
