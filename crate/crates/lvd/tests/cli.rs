use std::fs;
use std::path::Path;

use lvd::checkpoint::Checkpoint;
use lvd::cli::run;
use lvd::export::read_clip;

const TINY: [&str; 16] = [
    "--seed",
    "5",
    "--set",
    "data.num_clips=8",
    "--set",
    "codec_train.steps=10",
    "--set",
    "train.steps=6",
    "--set",
    "train.batch=2",
    "--set",
    "backbone.d_model=16",
    "--set",
    "backbone.heads=2",
    "--set",
    "backbone.blocks=2",
];

fn lvd(args: &[&str]) -> anyhow::Result<()> {
    run(["lvd", "-q"].iter().chain(args))
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn pngs(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "png")
        })
        .count()
}

#[test]
fn train_sample_encode_decode() {
    let root = tempfile::tempdir().unwrap();
    let ck = root.path().join("ck");
    lvd(&[&["train", "--out", &s(&ck)][..], &TINY[..]].concat()).unwrap();
    assert_eq!(
        fs::read_to_string(ck.join("loss.txt"))
            .unwrap()
            .lines()
            .count(),
        6
    );
    let loaded = Checkpoint::load(&ck).unwrap();
    assert_eq!(loaded.state.unwrap().step, 6);

    for (mode, frames) in [
        ("t2v", 9),
        ("i2v", 9),
        ("predict", 9),
        ("long", 15),
        ("image", 1),
    ] {
        let out = root.path().join(mode);
        lvd(&[
            "sample",
            "--checkpoint",
            &s(&ck),
            "--out",
            &s(&out),
            "--mode",
            mode,
            "--steps",
            "4",
            "--class",
            "7",
        ])
        .unwrap();
        assert_eq!(pngs(&out), frames, "{mode}");
        let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
        assert!(
            manifest.contains("guidance") && manifest.contains("seed"),
            "{manifest}"
        );
    }
    let err = lvd(&[
        "sample",
        "--checkpoint",
        &s(&ck),
        "--out",
        &s(&root.path().join("sr")),
        "--mode",
        "superres",
    ])
    .unwrap_err();
    assert!(format!("{err:#}").contains("superres"));

    let lat = root.path().join("lat");
    lvd(&[
        "encode",
        "--checkpoint",
        &s(&ck),
        "--input",
        &s(&root.path().join("t2v")),
        "--out",
        &s(&lat),
    ])
    .unwrap();
    let dec = root.path().join("dec");
    lvd(&[
        "decode",
        "--checkpoint",
        &s(&ck),
        "--input",
        &s(&lat),
        "--out",
        &s(&dec),
    ])
    .unwrap();
    assert_eq!(read_clip(&dec).unwrap().frames(), 9);

    let img = root.path().join("img_lat");
    lvd(&[
        "encode",
        "--checkpoint",
        &s(&ck),
        "--input",
        &s(&root.path().join("t2v")),
        "--out",
        &s(&img),
        "--images",
    ])
    .unwrap();
    let dec = root.path().join("img_dec");
    lvd(&[
        "decode",
        "--checkpoint",
        &s(&ck),
        "--input",
        &s(&img),
        "--out",
        &s(&dec),
    ])
    .unwrap();
    assert_eq!(read_clip(&dec).unwrap().frames(), 9);
}

#[test]
fn superres_then_sample() {
    let root = tempfile::tempdir().unwrap();
    let ck = root.path().join("ck");
    lvd(&[&["train", "--out", &s(&ck)][..], &TINY[..]].concat()).unwrap();
    let out = root.path().join("sr");
    lvd(&[
        "superres",
        "--checkpoint",
        &s(&ck),
        "--out",
        &s(&out),
        "--set",
        "superres.steps=3",
        "--set",
        "superres.d_model=16",
        "--set",
        "sample.steps=3",
    ])
    .unwrap();
    let clip = read_clip(&out).unwrap();
    assert_eq!((clip.frames(), clip.height(), clip.width()), (9, 32, 32));
    assert!(Checkpoint::load(&ck).unwrap().superres.is_some());
    let up = root.path().join("sample_sr");
    lvd(&[
        "sample",
        "--checkpoint",
        &s(&ck),
        "--out",
        &s(&up),
        "--mode",
        "superres",
        "--steps",
        "3",
    ])
    .unwrap();
    assert_eq!(pngs(&up), 9);
}

#[test]
fn config_file_and_failures() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("run.toml");
    fs::write(&cfg, "[data]\nnum_clips = 2\nseed = 9\n").unwrap();
    let data = root.path().join("data");
    lvd(&["gen-data", "--config", &s(&cfg), "--out", &s(&data)]).unwrap();
    assert_eq!(
        fs::read_to_string(data.join("index.txt"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    fs::write(&cfg, "[backbone]\nd_modle = 3\n").unwrap();
    let err = lvd(&["gen-data", "--config", &s(&cfg), "--out", &s(&data)]).unwrap_err();
    assert!(format!("{err:#}").contains("backbone.d_model"));
    assert!(lvd(&[
        "train",
        "--out",
        &s(&root.path().join("x")),
        "--set",
        "train.image_mix=1.5"
    ])
    .is_err());
    assert!(lvd(&["train", "--out", &s(&root.path().join("none")), "--resume"]).is_err());
    assert!(lvd(&[
        "sample",
        "--checkpoint",
        &s(&root.path().join("none")),
        "--out",
        &s(&data)
    ])
    .is_err());
    assert!(lvd(&["gradcheck", "--samples", "many"]).is_err());
}

#[test]
fn gradcheck_and_paramcount_succeed() {
    lvd(&["gradcheck", "--samples", "40"]).unwrap();
    lvd(&["paramcount", "--preset", "desk", "--adaln", "separate"]).unwrap();
}
