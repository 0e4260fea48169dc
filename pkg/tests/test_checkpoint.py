"""
Test cases for binary checkpoints.
"""

import hashlib
import struct
import unittest

import torch

from disentangle_seg.checkpoint import (
    HEADER,
    MAGIC,
    load_checkpoint,
    restore,
    save_checkpoint,
)
from disentangle_seg.config import build_model, class_partition
from disentangle_seg.exceptions import CheckpointFormatError
from disentangle_seg.protocol import ContinualState
from tests.test_config import BaseTestCase, class_names, tiny_config


def rewrite(path, body):
    path.write_bytes(body + hashlib.sha256(body).digest())


class TestCheckpoint(BaseTestCase):
    """Test cases for saving, verifying and restoring checkpoints."""

    def setUp(self):
        super().setUp()
        self.cfg = tiny_config()
        model = build_model(self.cfg, class_names(4))
        for c in (1, 2, 3):
            model.text_bank.add_class_prompt(c)
        with torch.no_grad():
            for param in model.parameters():
                param.add_(0.01 * torch.randn_like(param))
        model.text_bank.prompts.freeze(1)
        model.text_bank.prompts.freeze(2)
        self.state = ContinualState(model, class_partition(self.cfg, 4), step=2)
        self.path = save_checkpoint(self.state, self.make_tempdir() / "ckpt" / "step2.ckpt", self.cfg)

    def test_round_trip_forward_is_bit_exact(self):
        """Test that a restored model predicts exactly like the saved one."""
        state, cfg = restore(self.path)
        images = torch.rand(2, 3, 16, 16)
        self.state.model.eval()
        state.model.eval()
        with torch.no_grad():
            before = self.state.model(images, [1, 2, 3]).logits.logits
            after = state.model(images, [1, 2, 3]).logits.logits
        self.assertTensorEqual(after, before)
        self.assertEqual(cfg.explicit(), self.cfg.explicit())

    def test_metadata(self):
        """Test step, partition and prompt ownership."""
        payload = load_checkpoint(self.path)
        self.assertEqual(payload.step, 2)
        self.assertEqual(payload.metadata["partition"], {"mode": "overlapped", "steps": [[1, 2], [3], [4]]})
        self.assertEqual(payload.metadata["prompts"]["classes"], [1, 2, 3])
        self.assertEqual(payload.metadata["prompts"]["frozen"], ["class_1", "class_2"])
        self.assertEqual(payload.metadata["class_names"]["4"], class_names(4)[4])

    def test_restored_state(self):
        """Test the step counter and frozen prompts after restore."""
        state, _ = restore(self.path)
        store = state.model.text_bank.prompts
        self.assertEqual(state.step, 2)
        self.assertEqual(state.partition, self.state.partition)
        self.assertTrue(store.is_frozen(2))
        self.assertFalse(store.parameter(2).requires_grad)
        self.assertFalse(store.is_frozen(3))

    def test_tampered_checksum(self):
        """Test that a flipped byte fails verification at the digest."""
        data = bytearray(self.path.read_bytes())
        data[HEADER.size + 3] ^= 0xFF
        self.path.write_bytes(bytes(data))
        with self.assertRaises(CheckpointFormatError) as cm:
            load_checkpoint(self.path)
        self.assertEqual(cm.exception.offset, len(data) - 32)
        self.assertIn("checksum", cm.exception.reason)

    def test_bad_magic(self):
        """Test a wrong magic with a valid digest."""
        body = self.path.read_bytes()[:-32]
        rewrite(self.path, b"NOTACKPT" + body[len(MAGIC):])
        with self.assertRaises(CheckpointFormatError) as cm:
            load_checkpoint(self.path)
        self.assertEqual(cm.exception.offset, 0)

    def test_unsupported_version(self):
        """Test that the version field is checked."""
        body = bytearray(self.path.read_bytes()[:-32])
        body[len(MAGIC):len(MAGIC) + 2] = struct.pack("<H", 99)
        rewrite(self.path, bytes(body))
        with self.assertRaises(CheckpointFormatError) as cm:
            load_checkpoint(self.path)
        self.assertEqual(cm.exception.offset, len(MAGIC))

    def test_truncated_blobs(self):
        """Test a body cut short with a matching digest."""
        body = self.path.read_bytes()[:-32]
        rewrite(self.path, body[:-7])
        with self.assertRaises(CheckpointFormatError) as cm:
            load_checkpoint(self.path)
        self.assertIn("truncated", cm.exception.reason)

    def test_trailing_bytes(self):
        """Test that extra bytes after the blobs are rejected."""
        body = self.path.read_bytes()[:-32]
        rewrite(self.path, body + b"\x00")
        with self.assertRaises(CheckpointFormatError) as cm:
            load_checkpoint(self.path)
        self.assertEqual(cm.exception.offset, len(body))

    def test_too_short(self):
        """Test a file shorter than header and digest."""
        self.path.write_bytes(b"DSEG")
        with self.assertRaises(CheckpointFormatError):
            load_checkpoint(self.path)


if __name__ == "__main__":
    unittest.main()
