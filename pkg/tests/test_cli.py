"""CLI tests: workflows end to end, exit codes, determinism, help coverage."""

import json

import numpy as np
import pytest

from maskpipe.cli import build_parser, main
from maskpipe.dataset_voc import (
    VocAnnotation,
    VocObject,
    read_slice_dataset,
    serialize_voc,
    write_ppm,
)
from maskpipe.fewshot import write_embeddings
from maskpipe.video_pipeline import open_stream


@pytest.fixture
def voc_fixture(tmp_path):
    """Three annotated images with PPM pixels on disk."""
    rng = np.random.default_rng(0)
    voc = tmp_path / "voc"
    images = tmp_path / "images"
    voc.mkdir()
    images.mkdir()
    specs = [
        ("a.ppm", [("with_mask", 2, 2, 20, 20), ("without_mask", 25, 5, 40, 30)]),
        ("b.ppm", [("with_mask", 5, 5, 30, 30)]),
        ("c.ppm", [("mask_weared_incorrect", 10, 10, 35, 35)]),
    ]
    for name, objects in specs:
        img = rng.integers(0, 256, size=(48, 64, 3), dtype=np.uint8)
        write_ppm(images / name, img)
        ann = VocAnnotation(
            name, 64, 48, tuple(VocObject(cls, *box) for cls, *box in objects)
        )
        (voc / f"{name}.xml").write_text(serialize_voc(ann))
    return voc, images


@pytest.fixture
def memb_fixture(tmp_path):
    rng = np.random.default_rng(1)
    train, val = tmp_path / "train.memb", tmp_path / "val.memb"
    ids, vecs, qids, qvecs = [], [], [], []
    for k in range(3):
        for _ in range(60):
            ids.append(k)
            vecs.append(rng.normal(size=6) + 10.0 * k)
        for _ in range(20):
            qids.append(k)
            qvecs.append(rng.normal(size=6) + 10.0 * k)
    write_embeddings(train, ids, np.stack(vecs))
    write_embeddings(val, qids, np.stack(qvecs))
    return train, val


class TestDatasetCommands:
    def test_build_slices_and_stats(self, voc_fixture, tmp_path, capsys):
        voc, images = voc_fixture
        out = tmp_path / "slices"
        assert main([
            "dataset", "build-slices", "--voc-dir", str(voc),
            "--images-dir", str(images), "--out", str(out),
        ]) == 0
        assert (out / "slices.tsv").exists()
        capsys.readouterr()
        assert main(["dataset", "stats", "--dataset", str(out)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "2 / 1 / 1"
        assert any("imbalance" in l for l in lines)

    def test_stats_from_voc_dir(self, voc_fixture, capsys):
        voc, _ = voc_fixture
        assert main(["dataset", "stats", "--voc-dir", str(voc)]) == 0
        assert capsys.readouterr().out.splitlines()[0] == "2 / 1 / 1"

    def test_undersample_roundtrip(self, voc_fixture, tmp_path, capsys):
        voc, images = voc_fixture
        full = tmp_path / "full"
        small = tmp_path / "small"
        main(["dataset", "build-slices", "--voc-dir", str(voc),
              "--images-dir", str(images), "--out", str(full)])
        assert main(["dataset", "undersample", "--dataset", str(full),
                     "--cap", "1", "--seed", "3", "--out", str(small)]) == 0
        kept = read_slice_dataset(small)
        assert len(kept) == 3  # one per class

    def test_augment_deterministic(self, voc_fixture, tmp_path):
        voc, images = voc_fixture
        full = tmp_path / "full"
        main(["dataset", "build-slices", "--voc-dir", str(voc),
              "--images-dir", str(images), "--out", str(full)])
        outs = []
        for name in ("aug1", "aug2"):
            out = tmp_path / name
            assert main(["dataset", "augment", "--dataset", str(full),
                         "--seed", "4", "--out", str(out)]) == 0
            outs.append(out)
        a = (outs[0] / "slices.tsv").read_bytes()
        assert a == (outs[1] / "slices.tsv").read_bytes()
        for crop in sorted((outs[0] / "crops").glob("*.ppm")):
            twin = outs[1] / "crops" / crop.name
            assert crop.read_bytes() == twin.read_bytes()

    def test_split_reproducible(self, voc_fixture, tmp_path):
        voc, _ = voc_fixture
        out1, out2 = tmp_path / "s1", tmp_path / "s2"
        for out in (out1, out2):
            assert main(["dataset", "split", "--voc-dir", str(voc),
                         "--seed", "5", "--out", str(out)]) == 0
        assert (out1 / "train.txt").read_bytes() == (out2 / "train.txt").read_bytes()
        assert (out1 / "val.txt").read_bytes() == (out2 / "val.txt").read_bytes()

    def test_empty_dir_exit_2(self, tmp_path, capsys):
        assert main(["dataset", "stats", "--voc-dir", str(tmp_path)]) == 2


class TestEvalCommands:
    def test_perfect_detections(self, voc_fixture, tmp_path, capsys):
        voc, _ = voc_fixture
        pred = tmp_path / "pred.jsonl"
        lines = []
        for xml in sorted(voc.glob("*.xml")):
            from maskpipe.dataset_voc import MASK_CATALOG, parse_voc

            ann = parse_voc(xml.read_text())
            dets = [
                {
                    "x1": (o.xmin - 1) / ann.width, "y1": (o.ymin - 1) / ann.height,
                    "x2": o.xmax / ann.width, "y2": o.ymax / ann.height,
                    "conf": 0.9, "class_id": MASK_CATALOG.id_of(o.name),
                }
                for o in ann.objects
            ]
            lines.append(json.dumps({"image": ann.filename, "detections": dets}))
        pred.write_text("\n".join(lines) + "\n")
        assert main(["eval", "detections", "--pred", str(pred),
                     "--truth-dir", str(voc)]) == 0
        out = capsys.readouterr().out
        assert "macro" in out and "1.0000" in out

    def test_missing_truth_dir_exit_2(self, tmp_path, capsys):
        pred = tmp_path / "pred.jsonl"
        pred.write_text("")
        assert main(["eval", "detections", "--pred", str(pred),
                     "--truth-dir", str(tmp_path / "nope")]) == 2

    def test_episodic_from_memb(self, memb_fixture, capsys):
        train, val = memb_fixture
        assert main(["eval", "episodic", "--emb-train", str(train),
                     "--emb-val", str(val), "--support-size", "30"]) == 0
        out = capsys.readouterr().out
        assert "accuracy 1.0000 over 60 queries" in out

    def test_sweep_four_rows(self, memb_fixture, capsys):
        train, val = memb_fixture
        assert main(["eval", "sweep", "--emb-train", str(train), "--emb-val", str(val),
                     "--sizes", "10,20,30,full"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].startswith("Settings")
        assert [l.split()[0] for l in lines[1:]] == [
            "support-10", "support-20", "support-30", "support-full",
        ]

    def test_sweep_oversized_support_exit_1(self, memb_fixture, capsys):
        train, val = memb_fixture
        assert main(["eval", "sweep", "--emb-train", str(train), "--emb-val", str(val),
                     "--sizes", "500"]) == 1


class TestVideoCommands:
    def make_video(self, tmp_path, frames=12):
        path = tmp_path / "in.mdvs"
        assert main(["video", "synth", "--out", str(path), "--frames", str(frames),
                     "--width", "64", "--height", "48"]) == 0
        return path

    def test_annotate_round_trip(self, tmp_path, capsys):
        video = self.make_video(tmp_path)
        out = tmp_path / "out.mdvs"
        assert main(["annotate", "--in", str(video), "--model", "synthetic",
                     "--skip", "3", "--out", str(out)]) == 0
        stdout = capsys.readouterr().out
        assert "4 model calls over 12 frames (skip=3)" in stdout
        stream = open_stream(out)
        assert stream.frame_count == 12
        sidecar = (tmp_path / "out.mdvs.sidecar.jsonl").read_text().splitlines()
        assert json.loads(sidecar[0])["labels"][0] == "with_mask"
        assert len(sidecar) == 13

    def test_annotate_deterministic(self, tmp_path):
        video = self.make_video(tmp_path)
        a, b = tmp_path / "a.mdvs", tmp_path / "b.mdvs"
        for out in (a, b):
            main(["annotate", "--in", str(video), "--model", "synthetic:moving",
                  "--skip", "2", "--track", "--out", str(out)])
        assert a.read_bytes() == b.read_bytes()
        assert (tmp_path / "a.mdvs.sidecar.jsonl").read_bytes() == (
            tmp_path / "b.mdvs.sidecar.jsonl"
        ).read_bytes()

    def test_bench_prints_report(self, tmp_path, capsys):
        video = self.make_video(tmp_path)
        assert main(["bench", "--in", str(video), "--model", "synthetic"]) == 0
        out = capsys.readouterr().out
        assert "64x48" in out and "frames/s" in out

    def test_missing_video_exit_2(self, tmp_path, capsys):
        assert main(["annotate", "--in", str(tmp_path / "no.mdvs"),
                     "--model", "synthetic", "--out", str(tmp_path / "o.mdvs")]) == 2

    def test_export_import_cycle(self, tmp_path):
        video = self.make_video(tmp_path, frames=4)
        frames_dir = tmp_path / "frames"
        rebuilt = tmp_path / "rebuilt.mdvs"
        assert main(["video", "export", "--in", str(video),
                     "--out-dir", str(frames_dir)]) == 0
        assert len(list(frames_dir.glob("*.ppm"))) == 4
        assert main(["video", "import", "--frames-dir", str(frames_dir),
                     "--fps", "25/1", "--out", str(rebuilt)]) == 0
        assert rebuilt.read_bytes() == video.read_bytes()


class TestLossCheck:
    def test_default_run_passes(self, capsys):
        assert main(["loss", "check", "--grids", "5"]) == 0
        out = capsys.readouterr().out
        assert "alpha=1.25 beta=1.0" in out
        assert "max relative gradient error" in out

    def test_bad_weights_exit_1(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("alpha=2.0 beta=1.5\n")
        assert main(["loss", "check", "--cfg", str(cfg)]) == 1


class TestHelp:
    SUBCOMMANDS = [
        ["dataset", "build-slices"],
        ["dataset", "stats"],
        ["dataset", "undersample"],
        ["dataset", "augment"],
        ["dataset", "split"],
        ["eval", "detections"],
        ["eval", "episodic"],
        ["eval", "sweep"],
        ["annotate"],
        ["bench"],
        ["loss", "check"],
        ["video", "synth"],
        ["video", "export"],
        ["video", "import"],
    ]

    def test_every_flag_documented(self, capsys):
        # --help must name every registered option of every subcommand
        parser = build_parser()
        for cmd in self.SUBCOMMANDS:
            with pytest.raises(SystemExit) as exc:
                main([*cmd, "--help"])
            assert exc.value.code == 0
            help_text = capsys.readouterr().out
            sub = parser
            for part in cmd:
                actions = next(
                    a for a in sub._actions if isinstance(a, type(sub._subparsers._group_actions[0]))
                )
                sub = actions.choices[part]
            for action in sub._actions:
                for opt in action.option_strings:
                    if opt.startswith("--"):
                        assert opt in help_text, f"{cmd}: {opt} missing from --help"

    def test_top_level_lists_commands(self, capsys):
        with pytest.raises(SystemExit):
            main(["--help"])
        out = capsys.readouterr().out
        for cmd in ("dataset", "eval", "annotate", "bench", "loss", "video"):
            assert cmd in out
