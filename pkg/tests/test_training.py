import math

import numpy as np
import pytest
import torch

from mave.codec_stream import CodecGrid, ManifestRecord, SpanMask, SpecialVocab, read_manifest
from mave.config import named_config
from mave.decoder import MaveModel
from mave.training import (
    DEFAULT_ALPHA,
    DegenerateBatchError,
    SynthTask,
    Trainer,
    TrainerConfig,
    example_from_spans,
    load_utterances,
    loss_weights,
    make_training_example,
    make_word_masked_eval,
    splitmix64,
    synth_corpus,
    weighted_nll,
)


def brute_force_nll(logits, targets, valid, alpha):
    T, K, V = logits.shape
    total = 0.0
    for k in range(K):
        terms = []
        for t in range(T):
            if valid[t, k]:
                row = [float(x) for x in logits[t, k]]
                m = max(row)
                lse = m + math.log(sum(math.exp(x - m) for x in row))
                terms.append(lse - row[int(targets[t, k])])
        if terms:
            total += alpha[k] * sum(terms) / len(terms)
    return total


class TestWeights:
    def test_default_sums_to_one(self):
        assert math.fsum(DEFAULT_ALPHA) == 1.0  # exactly rounded sum of the stored weights
        assert DEFAULT_ALPHA == (0.25, 0.25, 0.25, 0.05, 0.05, 0.05, 0.05, 0.05)

    def test_truncated_renormalised(self):
        w = loss_weights(4)
        assert math.isclose(sum(w), 1.0, abs_tol=1e-15)
        assert w[0] == w[1] == w[2] and w[0] / w[3] == pytest.approx(5.0)


class TestWeightedNLL:
    @pytest.mark.parametrize("seed", range(10))
    def test_brute_force(self, f64, seed):
        g = torch.Generator().manual_seed(seed)
        T, K, V = 4, 2, 8
        logits = torch.randn(T, K, V, generator=g) * 3
        targets = torch.randint(0, V, (T, K), generator=g)
        valid = torch.rand(T, K, generator=g) > 0.3
        valid[0] = True
        alpha = (0.7, 0.3)
        got = weighted_nll(logits, targets, valid, alpha)[0].item()
        assert abs(got - brute_force_nll(logits, targets, valid, alpha)) < 1e-10

    def test_uniform_over_1024(self, f64):
        logits = torch.zeros(5, 8, 1024)
        targets = torch.randint(0, 1024, (5, 8))
        loss = weighted_nll(logits, targets, torch.ones(5, 8, dtype=torch.bool), DEFAULT_ALPHA)[0].item()
        assert abs(loss - 6.9315) < 1e-4
        assert abs(loss - math.log(1024)) < 1e-12

    def test_one_hot_correct(self, f64):
        targets = torch.randint(0, 16, (6, 8))
        logits = torch.full((6, 8, 16), -30.0).scatter(-1, targets[..., None], 30.0)
        loss = weighted_nll(logits, targets, torch.ones(6, 8, dtype=torch.bool), DEFAULT_ALPHA)[0].item()
        assert 0 <= loss < 1e-3

    def test_linear_in_alpha(self, f64):
        logits, targets = torch.randn(3, 2, 5), torch.randint(0, 5, (3, 2))
        valid = torch.ones(3, 2, dtype=torch.bool)
        a = weighted_nll(logits, targets, valid, (0.6, 0.4))[0]
        b = weighted_nll(logits, targets, valid, (1.2, 0.8))[0]
        assert b.item() == pytest.approx(2 * a.item(), rel=1e-14)

    def test_invalid_cells_ignored_bitwise(self, f64):
        logits, targets = torch.randn(5, 2, 7), torch.randint(0, 7, (5, 2))
        valid = torch.ones(5, 2, dtype=torch.bool)
        valid[1, 0] = valid[3, 1] = False
        other = logits.clone()
        other[1, 0] = torch.randn(7) * 100
        other[3, 1] = float("nan")
        a = weighted_nll(logits, targets, valid, (0.5, 0.5))[0]
        b = weighted_nll(other, targets, valid, (0.5, 0.5))[0]
        assert torch.equal(a, b)

    def test_all_invalid(self):
        with pytest.raises(DegenerateBatchError):
            weighted_nll(torch.zeros(2, 1, 3), torch.zeros(2, 1, dtype=torch.long), torch.zeros(2, 1, dtype=torch.bool), (1.0,))


V4 = SpecialVocab(1024)


class TestTrainingExample:
    def test_no_spans_is_plain_lm(self, rng):
        grid = CodecGrid(rng.integers(0, 1024, size=(6, 3)), 1024)
        ex = example_from_spans(grid, [2, 3], SpanMask(), V4)
        specials = (ex.targets == V4.bos) | (ex.targets == V4.pad) | (ex.targets >= V4.mask(1)) & (ex.targets <= V4.mask(3))
        np.testing.assert_array_equal(ex.valid, ~specials)
        assert not ex.infill.any()
        assert not (ex.targets == V4.eos).any()

    def test_five_segment_targets(self):
        lens = [2, 3, 1, 2, 2]
        segs = [np.full((n, 2), 10 * (i + 1)) + np.arange(n)[:, None] for i, n in enumerate(lens)]
        grid = CodecGrid(np.concatenate(segs), 1024)
        ex = example_from_spans(grid, [2], SpanMask([(2, 3), (6, 2)]), V4)
        # level 0 is undelayed: its infill targets are exactly the s2 and s4 tokens, all valid
        infill0 = ex.targets[ex.infill[:, 0], 0]
        np.testing.assert_array_equal(infill0, np.concatenate([segs[1][:, 0], segs[3][:, 0]]))
        assert ex.valid[ex.infill].all()
        infill1 = ex.targets[ex.infill[:, 1], 1]
        np.testing.assert_array_equal(infill1, np.concatenate([segs[1][:, 1], segs[3][:, 1]]))

    def test_valid_count_recount(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            L, K = int(rng.integers(1, 80)), int(rng.integers(1, 9))
            grid = CodecGrid(rng.integers(0, 1024, size=(L, K)), 1024)
            ex = make_training_example(grid, [2], rng, V4)
            special = sum(
                1 for t in ex.targets.reshape(-1) if t in (V4.bos, V4.pad, V4.mask(1), V4.mask(2), V4.mask(3))
            )
            assert ex.valid.sum() == ex.targets.size - special
            # BOS + L frames + per span (placeholder, trigger, EOS), delayed by K - 1, shifted by 1
            assert ex.inputs.shape == ex.targets.shape == (L + 3 * len(ex.spans) + K - 1, K)


class TestWordMaskedEval:
    def records(self, n_words, count=1):
        text = " ".join("ab" for _ in range(n_words))
        return [ManifestRecord("x.tok", text)] * count

    def test_six_words_mask_one(self):
        rng = np.random.default_rng(0)
        out = make_word_masked_eval(self.records(6, 200), rng)
        assert {r.extra[1].split(":")[1] for r in out} == {"1"}

    def test_thirty_words_upper_bound(self):
        rng = np.random.default_rng(0)
        out = make_word_masked_eval(self.records(30, 2000), rng)
        ms = [int(r.extra[1].split(":")[1]) for r in out]
        assert max(ms) == 15 and min(ms) == 1

    def test_short_transcripts_dropped(self):
        assert make_word_masked_eval(self.records(4, 5), np.random.default_rng(0)) == []

    def test_at_least_five_unmasked(self):
        rng = np.random.default_rng(1)
        lengths = rng.integers(5, 40, size=10_000)
        recs = [ManifestRecord("x.tok", " ".join(["a"] * int(n))) for n in lengths]
        out = make_word_masked_eval(recs, rng)
        for r in out:
            L = len(r.text.split())
            first, m = map(int, r.extra[1].split("=")[1].split(":"))
            assert 1 <= m <= min(L - 5, 15)
            assert L - m >= 5
            start, length = map(int, r.extra[0].split(":"))
            assert (start, length) == (first * 4, m * 4)


class TestSynth:
    def test_splitmix_reference_values(self):
        # first outputs of the reference SplitMix64 generator seeded with 0
        assert splitmix64(0) == 0xE220A8397B1DCDAF
        assert splitmix64(0x9E3779B97F4A7C15) == 0x6E789E6AA1B965F4

    def test_decode_inverts_render(self):
        task = SynthTask()
        grid = task.render("ab c", 2)
        assert grid.shape == (12, 4)
        assert task.decode(grid) == [(p, o, 2) for p in (0, 1, 2) for o in range(4)]

    def test_table_collision_free(self):
        tab = SynthTask().table().reshape(-1, 4)
        assert len({tuple(r) for r in tab}) == len(tab)

    def test_corpus_deterministic(self, tmp_path):
        a = synth_corpus(tmp_path / "a", 5, np.random.default_rng(3))
        b = synth_corpus(tmp_path / "b", 5, np.random.default_rng(3))
        for ra, rb in zip(read_manifest(a), read_manifest(b)):
            assert ra.text == rb.text
            assert open(ra.path, "rb").read() == open(rb.path, "rb").read()
        assert (tmp_path / "a" / "task.json").exists()


class TestTrainer:
    def test_lr_schedule(self):
        cfg = TrainerConfig(lr=1.0, warmup_steps=4)
        assert [cfg.lr_at(s) for s in range(4)] == [0.25, 0.5, 0.75, 1.0]
        assert cfg.lr_at(15) == pytest.approx(0.5)

    def test_loss_decreases_and_is_deterministic(self, tmp_path):
        manifest = synth_corpus(tmp_path, 8, np.random.default_rng(0))
        utts = load_utterances(manifest, SynthTask().phoneme_table())

        def run():
            torch.manual_seed(0)
            cfg = named_config("bench")
            cfg.decoder.codebook_size = 256
            model = MaveModel(cfg)
            tr = Trainer(model, utts, TrainerConfig(steps=12, batch_frames=200, lr=3e-3, warmup_steps=2))
            b = tr.batches()
            return [tr.train_step(b)["loss"] for _ in range(12)]

        first, second = run(), run()
        assert first == second
        assert np.mean(first[-3:]) < first[0]
