use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("data")
        .join(name)
}

fn run(args: &[&str], cache: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aminokernel"))
        .args(args)
        .env("AMINOKERNEL_CACHE_DIR", cache)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn selftest_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["selftest"], tmp.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn gram_is_cached_and_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let input = tmp.path().join("seqs.tsv");
    fs::write(
        &input,
        "p1\tPKYVKQNTLKLAT\np2\tGELIGILNAAKVPAD\np3\tFRKYTAFTIPSINNE\n",
    )
    .unwrap();
    let first = tmp.path().join("g1.tsv");
    let second = tmp.path().join("g2.tsv");

    let a = run(&["gram", "--input", s(&input), "--out", s(&first)], &cache);
    assert_eq!(
        a.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&a.stderr)
    );
    assert!(String::from_utf8_lossy(&a.stdout).contains("computed"));
    let b = run(&["gram", "--input", s(&input), "--out", s(&second)], &cache);
    assert!(String::from_utf8_lossy(&b.stdout).contains("cached"));
    assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());

    // A different beta is a different cache entry.
    let c = run(
        &[
            "gram",
            "--input",
            s(&input),
            "--out",
            s(&second),
            "--beta",
            "0.5",
        ],
        &cache,
    );
    assert!(String::from_utf8_lossy(&c.stdout).contains("computed"));
    assert_ne!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
}

fn partition(rows: impl Iterator<Item = (String, String)>) -> BTreeSet<BTreeSet<String>> {
    let mut groups: std::collections::BTreeMap<String, BTreeSet<String>> = Default::default();
    for (allele, cluster) in rows {
        groups.entry(cluster).or_default().insert(allele);
    }
    groups.into_values().collect()
}

#[test]
fn cluster_recovers_toy_families() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out = run(
        &[
            "cluster",
            "--fasta",
            s(&data("toy_drb.fasta")),
            "--out-dir",
            s(&out_dir),
            "--k",
            "3",
        ],
        &tmp.path().join("cache"),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "registry.tsv",
        "distances.tsv",
        "tree.nwk",
        "tree.json",
        "cut_3.tsv",
        "manifest.json",
    ] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let cut = fs::read_to_string(out_dir.join("cut_3.tsv")).unwrap();
    let got = partition(cut.lines().skip(1).flat_map(|line| {
        let cols: Vec<&str> = line.split('\t').collect();
        let id = cols[0].to_string();
        cols[5]
            .split(',')
            .map(move |m| (m.to_string(), id.clone()))
            .collect::<Vec<_>>()
    }));
    let expected = fs::read_to_string(data("toy_drb.expected.tsv")).unwrap();
    let want = partition(expected.lines().skip(1).map(|line| {
        let (a, c) = line.split_once('\t').unwrap();
        (a.to_string(), c.to_string())
    }));
    assert_eq!(got, want);
    let newick = fs::read_to_string(out_dir.join("tree.nwk")).unwrap();
    assert!(newick.trim_end().ends_with(';'));
}

#[test]
fn registry_writes_normal_forms() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("reg");
    let out = run(
        &[
            "registry",
            "--fasta",
            s(&data("toy_drb.fasta")),
            "--out-dir",
            s(&out_dir),
        ],
        tmp.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let fasta = fs::read_to_string(out_dir.join("normal_forms.fasta")).unwrap();
    assert_eq!(fasta.matches('>').count(), 12);
    for seq in fasta.lines().filter(|l| !l.starts_with('>')) {
        assert!(seq.starts_with("RFL") && seq.ends_with("TVQ"));
    }
}

#[test]
fn data_errors_exit_2_and_leave_nothing_behind() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.tsv");
    fs::write(
        &bad,
        "DRB1*0101\tPKYVKQNTLKLAT\t50\t1\nDRB1*0101\tGELIGILNAAKVPAD\tnope\t2\n",
    )
    .unwrap();
    let out_dir = tmp.path().join("never");
    let out = run(
        &["predict-fixed", "--data", s(&bad), "--out-dir", s(&out_dir)],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    assert!(!out_dir.exists());

    let fasta = tmp.path().join("bad.fasta");
    fs::write(&fasta, ">x DRB1*01:01\nRFLAAA1TVQ\n").unwrap();
    let out = run(
        &["registry", "--fasta", s(&fasta), "--out-dir", s(&out_dir)],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn usage_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["gram"], tmp.path()).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"], tmp.path()).status.code(), Some(1));
    assert_eq!(
        run(&["gram", "--beta", "-1"], tmp.path()).status.code(),
        Some(1)
    );
    assert_eq!(run(&["--help"], tmp.path()).status.code(), Some(0));
}

#[test]
fn config_file_sets_defaults_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("seqs.tsv");
    fs::write(&input, "p1\tPKYVKQNTLKLAT\np2\tGELIGILNAAKVPAD\n").unwrap();
    let config = tmp.path().join("ak.toml");
    fs::write(&config, "[gram]\nbeta = 0.5\n").unwrap();
    let cache = tmp.path().join("cache");

    let from_config = tmp.path().join("a.tsv");
    let explicit = tmp.path().join("b.tsv");
    let overridden = tmp.path().join("c.tsv");
    let default = tmp.path().join("d.tsv");
    let ok = |o: Output| {
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        )
    };
    ok(run(
        &[
            "--config",
            s(&config),
            "gram",
            "--input",
            s(&input),
            "--out",
            s(&from_config),
        ],
        &cache,
    ));
    ok(run(
        &[
            "gram",
            "--input",
            s(&input),
            "--out",
            s(&explicit),
            "--beta",
            "0.5",
        ],
        &cache,
    ));
    ok(run(
        &[
            "--config",
            s(&config),
            "gram",
            "--input",
            s(&input),
            "--out",
            s(&overridden),
            "--beta",
            "0.11387",
        ],
        &cache,
    ));
    ok(run(
        &["gram", "--input", s(&input), "--out", s(&default)],
        &cache,
    ));
    assert_eq!(
        fs::read(&from_config).unwrap(),
        fs::read(&explicit).unwrap()
    );
    assert_eq!(fs::read(&overridden).unwrap(), fs::read(&default).unwrap());
    assert_ne!(fs::read(&from_config).unwrap(), fs::read(&default).unwrap());
}

#[test]
fn predict_fixed_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let peptides = [
        "PKYVKQNTLKLAT",
        "GELIGILNAAKVPAD",
        "FRKYTAFTIPSINNE",
        "AAYSDQATPLLLSPR",
        "YDKFLANVSTVLTGK",
        "LTKGILGFVFTLTVP",
        "EKKYFAATQFEPLAA",
        "NSVDEALAAAAGKPM",
        "QYIKANSKFIGITEL",
        "RVDGLSLASTSVWAK",
    ];
    let mut text = String::from("allele\tpeptide\tic50\n");
    for (i, p) in peptides.iter().enumerate() {
        text.push_str(&format!(
            "DRB1*0101\t{p}\t{}\n",
            [20, 40000, 300, 9000, 50][i % 5]
        ));
    }
    let input = tmp.path().join("bind.tsv");
    fs::write(&input, text).unwrap();
    let out_dir = tmp.path().join("fx");
    let out = run(
        &[
            "--seed",
            "7",
            "predict-fixed",
            "--data",
            s(&input),
            "--out-dir",
            s(&out_dir),
            "--betas",
            "0.05,0.11387",
            "--lambdas",
            "exp:-10:-8",
            "--assign-folds",
            "2",
            "--modulus",
        ],
        tmp.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "metrics.tsv",
        "predictions.tsv",
        "choices.tsv",
        "modulus.tsv",
        "manifest.json",
    ] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}
