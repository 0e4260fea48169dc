"""
Test cases for the continual-learning protocol.
"""

import unittest

import torch

from disentangle_seg.data_synth import SampleRecord
from disentangle_seg.decoder import FullResLogits
from disentangle_seg.exceptions import DomainError, StateError
from disentangle_seg.protocol import (
    ClassPartition,
    ContinualState,
    ContinualTrainer,
    PseudoLabelConfig,
    StepDataset,
    TrainingConfig,
    evaluation_dataset,
    metric_groups,
    partition_dataset,
    pseudo_label,
    remap_table,
    retains,
    snapshot,
)
from tests.test_config import BaseTestCase, tiny_model

SIZE = 16


def record(name, classes, split="train"):
    return SampleRecord(f"{split}/{name}.png", f"{split}/{name}_label.png", tuple(classes), split)


class RecordingLoader:
    """Synthesises a sample per record and remembers what was loaded."""

    def __init__(self):
        self.loaded = []

    def __call__(self, rec, root, size=None):
        self.loaded.append(rec.image_path)
        labels = torch.zeros(SIZE, SIZE, dtype=torch.long)
        band = SIZE // (len(rec.classes) + 1)
        for i, c in enumerate(rec.classes):
            labels[(i + 1) * band : (i + 2) * band] = c
        image = torch.stack([labels / 10.0, 1.0 - labels / 10.0, (labels % 2) * 0.5])
        return image.to(torch.get_default_dtype()), labels


CORPUS = [
    record("a", (1, 3)),
    record("b", (3, 4)),
    record("c", (1, 2)),
]


class TestClassPartition(BaseTestCase):
    """Test cases for class partitions."""

    def test_fifteen_one(self):
        """Test the step sizes of a 15-1 split over 20 classes."""
        partition = ClassPartition.from_split("15-1", 20)
        self.assertEqual([len(s) for s in partition.steps], [15, 1, 1, 1, 1, 1])
        self.assertEqual(partition.new_classes(6), [20])
        self.assertEqual(partition.old_classes(2), list(range(1, 16)))

    def test_short_last_step(self):
        """Test that the final step takes the remainder."""
        partition = ClassPartition.from_split("2-2", 5)
        self.assertEqual(partition.steps, ((1, 2), (3, 4), (5,)))

    def test_joint_is_single_step(self):
        """Test that joint mode ignores the split."""
        partition = ClassPartition.from_split("2-1", 4, mode="joint")
        self.assertEqual(partition.steps, ((1, 2, 3, 4),))

    def test_classes_until(self):
        """Test the cumulative class lists."""
        partition = ClassPartition.from_split("2-1", 4)
        self.assertEqual(partition.classes_until(0), [])
        self.assertEqual(partition.classes_until(2), [1, 2, 3])
        with self.assertRaises(DomainError):
            partition.classes_until(4)

    def test_rejections(self):
        """Test construction rules."""
        bad = [
            lambda: ClassPartition("disjoint", ((1, 2), (2, 3))),
            lambda: ClassPartition("disjoint", ((1,), ())),
            lambda: ClassPartition("disjoint", ((2,), (1,))),
            lambda: ClassPartition("joint", ((1,), (2,))),
            lambda: ClassPartition("sometimes", ((1,),)),
            lambda: ClassPartition.from_split("two-one", 4),
            lambda: ClassPartition.from_split("5-1", 4),
        ]
        for build in bad:
            with self.assertRaises(DomainError):
                build()

    def test_dict_round_trip(self):
        """Test serialisation to plain data."""
        partition = ClassPartition.from_split("2-1", 4, mode="disjoint")
        self.assertEqual(ClassPartition.from_dict(partition.to_dict()), partition)

    def test_metric_groups(self):
        """Test base, new and all groups."""
        partition = ClassPartition.from_split("2-1", 4)
        self.assertEqual(
            metric_groups(partition, 3), {"base": [1, 2], "new": [3, 4], "all": [0, 1, 2, 3, 4]}
        )


class TestRetention(BaseTestCase):
    """Test cases for per-step image retention and relabelling."""

    def kept(self, mode, step):
        partition = ClassPartition.from_split("2-1", 4, mode=mode)
        return [r.image_path[6] for r in CORPUS if retains(r, partition, step)]

    def test_disjoint(self):
        """Test that future classes exclude an image."""
        self.assertEqual(self.kept("disjoint", 1), ["c"])
        self.assertEqual(self.kept("disjoint", 2), ["a"])
        self.assertEqual(self.kept("disjoint", 3), ["b"])

    def test_overlapped(self):
        """Test that any current class keeps an image."""
        self.assertEqual(self.kept("overlapped", 1), ["a", "c"])
        self.assertEqual(self.kept("overlapped", 2), ["a", "b"])
        self.assertEqual(self.kept("overlapped", 3), ["b"])

    def test_joint(self):
        """Test that joint training keeps everything."""
        self.assertEqual(self.kept("joint", 1), ["a", "b", "c"])

    def test_relabel_to_current_classes(self):
        """Test that old and future pixels become background."""
        partition = ClassPartition.from_split("2-1", 4)
        dataset = partition_dataset(CORPUS, partition, 2, "/nowhere", loader=RecordingLoader())
        self.assertEqual(len(dataset), 2)
        for index in range(2):
            _, labels = dataset[index]
            self.assertEqual(set(labels.unique().tolist()), {0, 3})

    def test_evaluation_keeps_seen_classes(self):
        """Test that evaluation labels keep every seen class."""
        partition = ClassPartition.from_split("2-1", 4)
        dataset = evaluation_dataset(CORPUS, partition, 2, "/nowhere", loader=RecordingLoader())
        self.assertEqual(len(dataset), 3)
        _, labels = dataset[1]
        self.assertEqual(set(labels.unique().tolist()), {0, 3})

    def test_remap_table_keeps_ignore(self):
        """Test the lookup table."""
        table = remap_table([2, 5])
        self.assertEqual(table[torch.tensor([0, 1, 2, 5, 7, 255])].tolist(), [0, 0, 2, 5, 0, 255])

    def test_dataset_is_lazy(self):
        """Test that nothing is read before indexing."""
        loader = RecordingLoader()
        dataset = StepDataset(CORPUS, "/nowhere", [1], loader=loader)
        self.assertEqual(loader.loaded, [])
        dataset[2]
        self.assertEqual(loader.loaded, ["train/c.png"])


class TestPseudoLabel(BaseTestCase):
    """Test cases for pseudo-label merging."""

    def setUp(self):
        super().setUp()
        self.partition = ClassPartition.from_split("1-1", 3)
        self.cfg = PseudoLabelConfig(0.7)

    def test_merges_confident_old_predictions(self):
        """Test each pixel rule."""
        logits = torch.tensor([[[[0.0, 0.0, 0.0, 9.0]], [[9.0, 0.0, 0.0, 0.0]], [[0.0, 0.5, 9.0, 0.0]]]])
        y = torch.tensor([[[0, 0, 3, 0]]])
        out = pseudo_label(logits, y, self.cfg, self.partition, 3)
        self.assertEqual(out.tolist(), [[[1, 0, 3, 0]]])

    def test_full_resolution_logits_map_ids(self):
        """Test that channel indices map through the class ids."""
        logits = torch.tensor([[[[0.0]], [[0.0]], [[9.0]]]])
        y = torch.zeros(1, 1, 1, dtype=torch.long)
        out = pseudo_label(FullResLogits(logits, (1, 2)), y, self.cfg, self.partition, 3)
        self.assertEqual(out.item(), 2)

    def test_threshold_boundary(self):
        """Test a tie below the threshold and a bare win above it."""
        logits = torch.tensor([[[[0.0]], [[0.0]]]])
        y = torch.zeros(1, 1, 1, dtype=torch.long)
        partition = ClassPartition.from_split("1-1", 2)
        out = pseudo_label(logits, y, PseudoLabelConfig(0.5), partition, 2)
        self.assertEqual(out.item(), 0)
        logits[0, 1] = 1e-9
        out = pseudo_label(logits, y, PseudoLabelConfig(0.5), partition, 2)
        self.assertEqual(out.item(), 1)

    def test_state_errors(self):
        """Test that pseudo-labels need a previous model."""
        y = torch.zeros(1, 1, 1, dtype=torch.long)
        with self.assertRaises(StateError):
            pseudo_label(torch.zeros(1, 2, 1, 1), y, self.cfg, self.partition, 1)
        with self.assertRaises(StateError):
            pseudo_label(None, y, self.cfg, self.partition, 2)

    def test_resolution_mismatch(self):
        """Test that logits must match the label size."""
        with self.assertRaises(DomainError):
            pseudo_label(torch.zeros(1, 2, 2, 2), torch.zeros(1, 1, 1), self.cfg, self.partition, 2)

    def test_threshold_range(self):
        """Test the configuration bound."""
        with self.assertRaises(DomainError):
            PseudoLabelConfig(1.5)


class TestTrainingConfig(BaseTestCase):
    """Test cases for the optimisation schedule."""

    def test_step_lr(self):
        """Test base and incremental rates."""
        cfg = TrainingConfig(lr=1e-3, incremental_lr_scale=0.5)
        self.assertEqual(cfg.step_lr(1), 1e-3)
        self.assertEqual(cfg.step_lr(3), 5e-4)

    def test_rejections(self):
        """Test the validation rules."""
        for kwargs in (dict(epochs=-1), dict(batch_size=0), dict(lr=0.0)):
            with self.subTest(kwargs=kwargs), self.assertRaises(DomainError):
                TrainingConfig(**kwargs)


class TestContinualTrainer(BaseTestCase):
    """Test cases for running protocol steps."""

    def setUp(self):
        super().setUp()
        self.loader = RecordingLoader()
        self.train = CORPUS + [record("d", (2,)), record("e", (3,)), record("f", (4, 2))]
        self.test = [record("t1", (1, 3), "test"), record("t2", (2, 4), "test")]
        partition = ClassPartition.from_split("2-1", 4)
        self.state = ContinualState(tiny_model(with_prompts=False), partition)
        self.trainer = ContinualTrainer(
            self.state,
            self.train,
            self.test,
            "/nowhere",
            TrainingConfig(epochs=1, batch_size=2, eval_batch_size=2),
            loader=self.loader,
        )

    def test_steps_run_in_order(self):
        """Test that skipping or repeating a step is an error."""
        with self.assertRaises(StateError):
            self.trainer.run_step(2)
        self.trainer.run_step(1)
        with self.assertRaises(StateError):
            self.trainer.run_step(1)

    def test_first_step(self):
        """Test prompts, history and the absence of a snapshot."""
        result = self.trainer.run_step(1)
        self.assertEqual(result.step, 1)
        self.assertEqual(self.state.step, 1)
        self.assertIsNone(self.state.previous)
        self.assertEqual(self.state.model.text_bank.prompts.class_owners(), [1, 2])
        self.assertIn("ce", result.losses)
        self.assertNotIn("lpd", result.losses)
        self.assertIn("all", result.report.groups)

    def test_second_step_freezes_old_prompts(self):
        """Test frozen prompts and the unchanged snapshot after step 2."""
        self.trainer.run_step(1)
        store = self.state.model.text_bank.prompts
        before = {c: store.parameter(c).detach().clone() for c in (1, 2)}
        weights = {k: v.clone() for k, v in self.state.model.state_dict().items()}

        result = self.trainer.run_step(2)
        self.assertEqual(set(result.losses), {"ce", "lpd", "bkg"})
        for c in (1, 2):
            self.assertTrue(store.is_frozen(c))
            self.assertTensorEqual(store.parameter(c).detach(), before[c])
        self.assertFalse(store.is_frozen(3))
        self.assertTrue(store.parameter("background_0").requires_grad)

        previous = self.state.previous
        self.assertFalse(any(p.requires_grad for p in previous.parameters()))
        self.assertFalse(previous.training)
        for key, value in previous.state_dict().items():
            self.assertTensorEqual(value, weights[key])

    def test_data_access(self):
        """Test that training reads only retained images and never test images."""
        self.trainer.run_step(1)
        self.loader.loaded.clear()
        self.trainer.run_step(2)
        trained = [p for p in self.loader.loaded if p.startswith("train/")]
        self.assertEqual(sorted(set(trained)), ["train/a.png", "train/b.png", "train/e.png"])
        tested = [p for p in self.loader.loaded if p.startswith("test/")]
        self.assertEqual(sorted(set(tested)), ["test/t1.png", "test/t2.png"])

    def test_ablation_switches(self):
        """Test that disabled losses are not computed."""
        self.trainer.training = TrainingConfig(
            epochs=1, batch_size=2, use_lpd=False, use_mbd=False, use_pseudo_label=False
        )
        self.trainer.run_step(1)
        result = self.trainer.run_step(2)
        self.assertEqual(set(result.losses), {"ce"})

    def test_no_training_images(self):
        """Test a step with nothing to learn from."""
        self.trainer.train_records = [record("c", (1, 2))]
        self.trainer.run_step(1)
        with self.assertRaises(StateError):
            self.trainer.run_step(2)

    def test_run_all_steps(self):
        """Test a full run and the seen-class evaluation."""
        results = self.trainer.run()
        self.assertEqual([r.step for r in results], [1, 2, 3])
        self.assertEqual(len(self.state.history), 3)
        self.assertEqual(results[-1].confusion.size, 5)

    def test_snapshot_is_independent(self):
        """Test that the snapshot does not follow later updates."""
        model = self.state.model
        frozen = snapshot(model)
        with torch.no_grad():
            next(model.decoder.parameters()).add_(1.0)
        self.assertFalse(
            torch.equal(next(model.decoder.parameters()), next(frozen.decoder.parameters()))
        )


if __name__ == "__main__":
    unittest.main()
