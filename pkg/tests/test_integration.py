"""
Integration tests for the disentangle-seg library.
"""

import csv
import math
import unittest

from disentangle_seg.checkpoint import load_checkpoint
from disentangle_seg.config import shapes_config
from disentangle_seg.data_synth import generate_corpus
from disentangle_seg.experiment import (
    COMPONENT_GRID,
    PEFT_GRID,
    evaluate_checkpoint,
    run_ablation,
    run_experiment,
)
from tests.test_config import BaseTestCase, tiny_config


class TestIntegration(BaseTestCase):
    """Integration tests running the library end to end on a tiny corpus."""

    def setUp(self):
        super().setUp()
        self.tmp = self.make_tempdir()
        self.cfg = tiny_config()
        self.corpus = generate_corpus(
            shapes_config(self.cfg),
            self.cfg["data.n_train"],
            self.cfg["data.n_test"],
            self.cfg.sub_seed("data"),
            self.tmp / "data",
        )

    def test_full_run(self):
        """Test every step of an overlapped run."""
        results = run_experiment(self.cfg, self.corpus, self.tmp / "run")
        self.assertEqual([r.step for r in results], [1, 2, 3])
        last = results[-1]
        self.assertEqual(set(last.report.groups), {"base", "new", "all"})
        self.assertFalse(math.isnan(last.report.groups["all"]))
        self.assertFalse(math.isnan(last.report.topology))
        payload = load_checkpoint(self.tmp / "run" / "checkpoints" / "step3.ckpt")
        self.assertEqual(payload.step, 3)
        self.assertEqual(
            payload.metadata["prompts"]["frozen"], ["class_1", "class_2", "class_3"]
        )

    def test_runs_are_reproducible(self):
        """Test that the same config gives byte-identical reports."""
        run_experiment(self.cfg, self.corpus, self.tmp / "a", max_steps=2)
        run_experiment(self.cfg, self.corpus, self.tmp / "b", max_steps=2)
        for name in ("metrics_step1.csv", "metrics_step2.csv", "config.resolved"):
            self.assertEqual((self.tmp / "a" / name).read_bytes(), (self.tmp / "b" / name).read_bytes())

    def test_checkpoint_evaluation(self):
        """Test that re-evaluating a checkpoint reproduces its report."""
        results = run_experiment(self.cfg, self.corpus, self.tmp / "run", max_steps=2)
        result = evaluate_checkpoint(
            self.tmp / "run" / "checkpoints" / "step2.ckpt", self.corpus, self.tmp / "eval"
        )
        self.assertEqual(result.step, 2)
        self.assertEqual(result.confusion.counts.tolist(), results[-1].confusion.counts.tolist())

    def test_joint_upper_bound(self):
        """Test that joint mode trains every class in one step."""
        cfg = self.cfg.with_overrides(["protocol.mode=joint"])
        results = run_experiment(cfg, self.corpus, self.tmp / "joint")
        self.assertEqual(len(results), 1)
        self.assertTrue(math.isnan(results[0].report.groups["new"]))

    def test_peft_ablation(self):
        """Test one row per trainable set and the summary table."""
        rows = run_ablation("peft", self.cfg, self.corpus, self.tmp / "peft", max_steps=1)
        self.assertEqual([name for name, _ in rows], [name for name, _ in PEFT_GRID])
        with (self.tmp / "peft" / "ablation.csv").open(newline="") as f:
            table = list(csv.DictReader(f))
        self.assertEqual([row["row"] for row in table], [name for name, _ in PEFT_GRID])
        for name, _ in PEFT_GRID:
            self.assertTrue((self.tmp / "peft" / name / "config.resolved").exists())

    def test_component_ablation_switches(self):
        """Test that the baseline row runs without the method's parts."""
        rows = run_ablation("components", self.cfg, self.corpus, self.tmp / "comp", max_steps=2)
        self.assertEqual([name for name, _ in rows], [name for name, _ in COMPONENT_GRID])
        baseline = dict(rows)["baseline"]
        self.assertEqual(set(baseline.losses), {"ce"})
        full = dict(rows)["mbd"]
        self.assertEqual(set(full.losses), {"ce", "lpd", "bkg"})
        resolved = (self.tmp / "comp" / "baseline" / "config.resolved").read_text()
        self.assertIn("method.manifold = false", resolved)


if __name__ == "__main__":
    unittest.main()
