import numpy as np
import pytest
import torch

from burstlab import datasets, flow, losses, rawmodel as rm, synth, textures


@pytest.fixture(scope="module")
def stored(tmp_path_factory):
    root = tmp_path_factory.mktemp("augset")
    rng = np.random.default_rng(42)
    cfg = synth.SynthConfig(burst_size=4, scale=4, crop=40, zero_noise=True,
                            random_pipeline=True)
    for i in range(3):
        src = textures.random_texture(rng, (288, 288))
        synth.write_sample(root / f"sample_{i:04d}",
                           synth.generate_burst(src, 4, 4, rng, cfg))
    return root


def cfg(crop=32, flips=True, random_crop=True):
    return losses.TrainConfig(iterations=1, burst_size=4, crop=crop, flips=flips,
                              random_crop=random_crop)


class TestAugmentation:
    def test_shapes(self, stored):
        ds = datasets.SampleDataset(stored)
        ex = ds.load_training_example(0, cfg(), np.random.default_rng(0))
        assert ex.packed.shape == (4, 4, 16, 16)
        assert ex.gt.shape == (3, 128, 128)
        assert ex.flows.shape == (4, 16, 16, 2)

    def test_warp_residual_preserved_under_augmentation(self, stored):
        ds = datasets.SampleDataset(stored)
        for trial in range(24):
            ex = ds.load_training_example(trial % 3, cfg(), np.random.default_rng(trial))
            proxies = ex.packed[:, (0, 1, 3)]
            for i in range(1, 4):
                f = ex.flows[i]
                m = int(np.ceil(float(f.abs().max()))) + 1
                warped = flow.warp(proxies[i], f)
                resid = (warped - proxies[0])[:, m:-m, m:-m].pow(2).mean().sqrt().item()
                assert resid < 1e-2, f"trial {trial} frame {i}: {resid}"

    def test_gt_stays_registered_with_base(self, stored):
        ds = datasets.SampleDataset(stored)
        for trial in range(12):
            ex = ds.load_training_example(trial % 3, cfg(), np.random.default_rng(trial + 100))
            gt = np.ascontiguousarray(ex.gt.numpy().transpose(1, 2, 0))
            gt_lr = synth.downsample(rm.LinearRGB(gt), 8).data
            proxy = ex.packed[0, (0, 1, 3)].numpy().transpose(1, 2, 0)
            a = (gt_lr - gt_lr.mean()).ravel()
            b = (proxy - proxy.mean()).ravel()
            ncc = float(a @ b / np.sqrt((a @ a) * (b @ b)))
            assert ncc > 0.98, f"trial {trial}: ncc {ncc}"

    def test_base_frame_flow_stays_zero(self, stored):
        ds = datasets.SampleDataset(stored)
        for trial in range(8):
            ex = ds.load_training_example(0, cfg(), np.random.default_rng(trial))
            assert ex.flows[0].abs().max().item() == 0.0

    def test_flips_actually_occur(self, stored):
        ds = datasets.SampleDataset(stored)
        base = ds.load_training_example(0, cfg(flips=False, random_crop=False),
                                        np.random.default_rng(0))
        seen_different = False
        for trial in range(10):
            ex = ds.load_training_example(0, cfg(), np.random.default_rng(trial))
            if ex.packed.shape == base.packed.shape and \
                    not torch.equal(ex.packed, base.packed):
                seen_different = True
        assert seen_different

    def test_no_random_crop_is_deterministic(self, stored):
        ds = datasets.SampleDataset(stored)
        a = ds.load_training_example(1, cfg(flips=False, random_crop=False),
                                     np.random.default_rng(1))
        b = ds.load_training_example(1, cfg(flips=False, random_crop=False),
                                     np.random.default_rng(2))
        assert torch.equal(a.packed, b.packed)
        assert torch.equal(a.gt, b.gt)

    def test_crop_larger_than_stored_clamps(self, stored):
        ds = datasets.SampleDataset(stored)
        ex = ds.load_training_example(0, cfg(crop=64), np.random.default_rng(3))
        assert ex.packed.shape[-1] == 20  # stored 40 raw -> 20 packed


class TestEvalLoading:
    def test_truncation(self, stored):
        ds = datasets.SampleDataset(stored)
        ex = ds.load_eval_example(0, burst_size=2)
        assert ex.packed.shape[0] == 2 and ex.flows.shape[0] == 2

    def test_full_burst_default(self, stored):
        ds = datasets.SampleDataset(stored)
        ex = ds.load_eval_example(0)
        assert ex.packed.shape[0] == 4

    def test_eval_flows_match_stored(self, stored):
        ds = datasets.SampleDataset(stored)
        ex = ds.load_eval_example(1)
        sample = synth.read_sample(ds.dirs[1])
        np.testing.assert_array_equal(ex.flows[2].numpy(), sample.oracle_flows[2].data)
