"""End-to-end smoke test for the _tbd extension module.

Exercises dataset synthesis, program parsing, training, inference, checkpoint
round-trips, mask extraction, attention scoring, and the executor oracle.
Run with PYTHONPATH pointing at the built module directory.
"""

import json
import math
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

import _tbd


class SmokeTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = Path(tempfile.mkdtemp(prefix="tbd_py_"))
        cls.train_dir = str(cls.tmp / "train")
        cls.val_dir = str(cls.tmp / "val")
        _tbd.build_dataset(cls.train_dir, n_scenes=24, questions_per_scene=4, seed=41)
        _tbd.build_dataset(cls.val_dir, n_scenes=10, questions_per_scene=4, seed=42)
        cls.model = _tbd.train(
            {
                "d": 8,
                "hidden": 32,
                "batch_size": 16,
                "max_epochs": 1,
                "lr": 1e-3,
                "seed": 7,
            },
            cls.train_dir,
            cls.val_dir,
        )

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)

    def test_dataset_roundtrip(self):
        stats = _tbd.build_dataset(
            str(self.tmp / "again"), n_scenes=24, questions_per_scene=4, seed=41
        )
        self.assertEqual(stats["n_scenes"], 24)
        first = (Path(self.train_dir) / "images.bin").read_bytes()
        again = (self.tmp / "again" / "images.bin").read_bytes()
        self.assertEqual(first, again)

        ds = _tbd.Dataset(self.train_dir)
        self.assertEqual(ds.n_scenes, 24)
        self.assertEqual(ds.resolution, 14)
        self.assertEqual(ds.condition, "none")
        s = ds.sample(0)
        self.assertIn(s["answer"], _tbd.answer_vocab())
        img = ds.image(s["scene_id"])
        self.assertEqual(img.shape, (4, 56, 56))
        self.assertTrue(np.isfinite(img).all())
        segs = ds.segmentations(s["scene_id"])
        self.assertGreaterEqual(len(segs), 3)
        self.assertEqual(segs[0].shape, (1, 14, 14))
        self.assertEqual(len(s["node_sets"]), len([t for t in s["node_sets"]]))
        with self.assertRaises(IndexError):
            ds.sample(10**6)

    def test_program_parsing(self):
        canon = _tbd.canonical_program("query_count( attention[red]( scene ) )")
        self.assertEqual(canon, "query_count(attention[red](scene))")
        with self.assertRaisesRegex(RuntimeError, r"\[format\]"):
            _tbd.canonical_program("query_count(attention[red](scene)")

    def test_inference_and_checkpoint(self):
        ds = _tbd.Dataset(self.val_dir)
        s = ds.sample(0)
        img = ds.image(s["scene_id"])
        logits = self.model.logits(s["program"], img)
        self.assertEqual(logits.shape, (26,))
        ans = self.model.answer(s["program"], img)
        self.assertEqual(ans, _tbd.answer_vocab()[int(np.argmax(logits))])

        ckpt = str(self.tmp / "ckpt")
        self.model.save(ckpt)
        self.assertTrue((Path(ckpt) / "manifest.json").exists())
        reloaded = _tbd.Model(ckpt)
        self.assertEqual(reloaded.epoch, self.model.epoch)
        self.assertEqual(reloaded.config["d"], 8)
        np.testing.assert_array_equal(reloaded.logits(s["program"], img), logits)

        report = reloaded.evaluate(self.val_dir)
        self.assertEqual(report["n"], ds.n_samples)
        self.assertAlmostEqual(
            report["accuracy"],
            sum(
                report["family_accuracy"][f] * report["family_counts"][f]
                for f in report["family_accuracy"]
            )
            / report["n"],
        )

    def test_masks(self):
        ds = _tbd.Dataset(self.val_dir)
        s = ds.sample(0)
        pairs = self.model.masks(s["program"], ds.image(s["scene_id"]))
        self.assertEqual(pairs[0][0], "scene")
        np.testing.assert_array_equal(pairs[0][1], np.ones((1, 14, 14)))
        for token, mask in pairs:
            if mask is not None:
                self.assertEqual(mask.shape, (1, 14, 14))
                self.assertTrue((mask >= 0).all())
        self.assertIsNone(pairs[-1][1])  # root yields an encoding

    def test_attention_eval(self):
        ckpt = str(self.tmp / "ckpt_eval")
        self.model.save(ckpt)
        scores = _tbd.attention_eval(ckpt, self.val_dir, threshold=0.4)
        for key in ("micro_precision", "micro_recall", "macro_precision", "macro_recall"):
            self.assertTrue(0.0 <= scores[key] <= 1.0)
        self.assertGreater(scores["nodes_scored"], 0)
        self.assertEqual(scores["threshold"], 0.4)

    def test_finetune_identity(self):
        ta = str(self.tmp / "ta")
        va = str(self.tmp / "va")
        tb = str(self.tmp / "tb")
        vb = str(self.tmp / "vb")
        _tbd.build_dataset(ta, n_scenes=12, questions_per_scene=3, seed=50, condition="a")
        _tbd.build_dataset(va, n_scenes=6, questions_per_scene=3, seed=51, condition="a")
        _tbd.build_dataset(tb, n_scenes=12, questions_per_scene=3, seed=52, condition="b")
        _tbd.build_dataset(vb, n_scenes=6, questions_per_scene=3, seed=53, condition="b")
        base = _tbd.train(
            {"d": 8, "hidden": 32, "batch_size": 16, "max_epochs": 1, "seed": 9},
            ta,
            va,
        )
        ckpt = str(self.tmp / "ckpt_a")
        base.save(ckpt)
        out = _tbd.finetune(ckpt, {"max_epochs": 0}, tb, va, vb)
        self.assertEqual(out["a_before"]["accuracy"], out["a_after"]["accuracy"])
        self.assertEqual(out["b_before"]["accuracy"], out["b_after"]["accuracy"])
        self.assertEqual(out["model"].condition, "a")
        with self.assertRaisesRegex(RuntimeError, "condition mismatch"):
            _tbd.finetune(ckpt, {"max_epochs": 0}, ta, va, va)

    def test_oracle_check(self):
        rep = _tbd.oracle_check(max_depth=2, random_checks=50)
        self.assertEqual(rep["mismatches"], 0)
        self.assertGreater(rep["cases"], 0)

    def test_error_translation(self):
        with self.assertRaisesRegex(RuntimeError, r"\[io\]"):
            _tbd.Dataset(str(self.tmp / "missing"))
        with self.assertRaisesRegex(RuntimeError, r"\[config\]"):
            _tbd.train({"zap": 1}, self.train_dir, self.val_dir)


if __name__ == "__main__":
    unittest.main(verbosity=2)
