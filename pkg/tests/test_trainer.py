import itertools

import numpy as np
import pytest

from msrspeech import dsp
from msrspeech.errors import CheckpointError, EmptyRateError, TrainingError
from msrspeech.model import ModelConfig, PretrainModel
from msrspeech.trainer import (
    BASE_LIKE,
    MicroBatch,
    TrainConfig,
    Trainer,
    learning_rate_at,
    load_checkpoint,
    overhead_report,
    save_checkpoint,
    schedule_batches,
)

TWO_RATES = (16000, 24000)


@pytest.fixture(scope="module")
def train_setup(small_corpus_module):
    return small_corpus_module


@pytest.fixture(scope="module")
def small_corpus_module(tmp_path_factory):
    # module-local corpus kept tiny; trainer tests retrain repeatedly
    from msrspeech.dsp import mfcc
    from msrspeech.objective import assign_labels, kmeans_fit

    root = tmp_path_factory.mktemp("trainer_corpus")
    spec = dsp.CorpusSpec(duration_s=1.0, num_classes=3, count=8, seed=21)
    entries, tracks = dsp.generate_corpus(spec, root, rates=TWO_RATES)
    dsp.write_manifest(root / "manifest.tsv", entries)
    pool, per_utt = [], {}
    for e in entries:
        feats = mfcc(dsp.read_wav(root / e.path))
        per_utt[e.utt_id] = feats.frames
        pool.append(feats.frames)
    codebook = kmeans_fit(np.vstack(pool), 8, seed=3, embed_dim=16, n_init=3)
    labels = {uid: assign_labels(f, codebook) for uid, f in per_utt.items()}
    return {
        "dir": root,
        "entries": entries,
        "codebook": codebook,
        "labels": labels,
    }


def desk_cfg():
    return ModelConfig(rates=TWO_RATES, dim=32, inner_channels=16,
                       num_layers=1, num_heads=2, ffn_dim=64, num_clusters=8)


def train_cfg(**overrides):
    base = dict(total_steps=4, micro_batch_seconds=2.0, accum_count=2,
                rate_weights={r: 0.5 for r in TWO_RATES}, seed=5)
    base.update(overrides)
    return TrainConfig(**base)


class TestSchedule:
    def test_micro_batches_are_single_rate(self, train_setup):
        cfg = train_cfg()
        stream = schedule_batches(train_setup["entries"], cfg)
        for mb in itertools.islice(stream, 40):
            assert len({e.rate_hz for e in mb.entries}) == 1
            assert mb.rate_hz == mb.entries[0].rate_hz

    def test_audio_budget_respected(self, train_setup):
        cfg = train_cfg(micro_batch_seconds=2.5)
        for mb in itertools.islice(schedule_batches(train_setup["entries"], cfg), 40):
            total = sum(e.duration_s for e in mb.entries)
            assert total <= 2.5 + 1e-9
            assert len(mb.entries) >= 1

    def test_deterministic_given_seed(self, train_setup):
        cfg = train_cfg()
        a = [
            (mb.rate_hz, tuple(e.utt_id for e in mb.entries))
            for mb in itertools.islice(schedule_batches(train_setup["entries"], cfg), 60)
        ]
        b = [
            (mb.rate_hz, tuple(e.utt_id for e in mb.entries))
            for mb in itertools.islice(schedule_batches(train_setup["entries"], cfg), 60)
        ]
        assert a == b

    def test_rate_frequencies_match_weights(self, train_setup):
        cfg = train_cfg(accum_count=4)
        counts = {r: 0 for r in TWO_RATES}
        n_cycles = 1000
        for mb in itertools.islice(
            schedule_batches(train_setup["entries"], cfg), n_cycles * 4
        ):
            counts[mb.rate_hz] += 1
        for r in TWO_RATES:
            share = counts[r] / (n_cycles * 4)
            assert abs(share - 0.5) <= 0.05

    def test_empty_rate_rejected(self, train_setup):
        only_16k = [e for e in train_setup["entries"] if e.rate_hz == 16000]
        cfg = train_cfg()
        with pytest.raises(EmptyRateError):
            next(schedule_batches(only_16k, cfg))


class TestLearningRate:
    def test_linear_warmup_then_decay(self):
        cfg = train_cfg(total_steps=100, learning_rate=1e-3, warmup_steps=10)
        assert learning_rate_at(cfg, 0) == pytest.approx(1e-4)
        assert learning_rate_at(cfg, 9) == pytest.approx(1e-3)
        assert learning_rate_at(cfg, 10) == pytest.approx(1e-3)
        assert learning_rate_at(cfg, 99) < learning_rate_at(cfg, 50)
        assert learning_rate_at(cfg, 100) == 0.0

    def test_default_warmup_fraction(self):
        cfg = train_cfg(total_steps=300)
        assert cfg.resolved_warmup() == 24


class TestTrainStep:
    def test_zero_learning_rate_keeps_parameters(self, train_setup):
        model = PretrainModel.build(desk_cfg(), train_setup["codebook"], seed=1)
        before = {k: v.copy() for k, v in model.params().items()}
        cfg = train_cfg(learning_rate=0.0, total_steps=2)
        Trainer(model, cfg, train_setup["labels"], train_setup["dir"]).run(
            train_setup["entries"]
        )
        after = model.params()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_accumulation_split_equivalence(self, train_setup):
        e16 = [e for e in train_setup["entries"] if e.rate_hz == 16000][:4]
        results = []
        for split in (False, True):
            model = PretrainModel.build(desk_cfg(), train_setup["codebook"], seed=1)
            cfg = train_cfg(
                total_steps=1, micro_batch_seconds=99.0,
                accum_count=2 if split else 1,
                rate_weights={16000: 1.0},
            )
            trainer = Trainer(model, cfg, train_setup["labels"], train_setup["dir"])
            batches = (
                [MicroBatch(16000, e16[:2], 0), MicroBatch(16000, e16[2:], 0)]
                if split
                else [MicroBatch(16000, e16, 0)]
            )
            record = trainer.train_step(batches)
            results.append((record["loss"], model.params()))
        (loss_a, params_a), (loss_b, params_b) = results
        assert loss_a == pytest.approx(loss_b, rel=1e-6)
        for k in params_a:
            denom = np.abs(params_a[k]).max() + 1e-12
            assert np.abs(params_a[k] - params_b[k]).max() / denom < 1e-6, k

    def test_whole_run_deterministic(self, train_setup):
        curves = []
        for _ in range(2):
            model = PretrainModel.build(desk_cfg(), train_setup["codebook"], seed=1)
            cfg = train_cfg(total_steps=3)
            hist = Trainer(model, cfg, train_setup["labels"], train_setup["dir"]).run(
                train_setup["entries"]
            )
            curves.append([h["loss"] for h in hist])
        assert curves[0] == curves[1]

    def test_metrics_csv(self, train_setup, tmp_path):
        model = PretrainModel.build(desk_cfg(), train_setup["codebook"], seed=1)
        cfg = train_cfg(total_steps=3)
        path = tmp_path / "metrics.csv"
        Trainer(model, cfg, train_setup["labels"], train_setup["dir"]).run(
            train_setup["entries"], metrics_path=path
        )
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,loss,grad_norm,lr,rate_mix"
        assert len(lines) == 4

    def test_non_finite_loss_aborts_with_diagnostics(self, train_setup):
        model = PretrainModel.build(desk_cfg(), train_setup["codebook"], seed=1)
        model.head.proj[...] = np.nan
        cfg = train_cfg(total_steps=1)
        trainer = Trainer(model, cfg, train_setup["labels"], train_setup["dir"])
        with pytest.raises(TrainingError) as ei:
            trainer.run(train_setup["entries"])
        msg = str(ei.value)
        assert "step 0" in msg and "utt" in msg and "Hz" in msg

    def test_loss_stays_finite_over_many_steps(self, train_setup):
        model = PretrainModel.build(desk_cfg(), train_setup["codebook"], seed=1)
        cfg = train_cfg(total_steps=1000, learning_rate=4e-3,
                        micro_batch_seconds=1.0, accum_count=1)
        hist = Trainer(model, cfg, train_setup["labels"], train_setup["dir"]).run(
            train_setup["entries"]
        )
        assert len(hist) == 1000
        assert all(np.isfinite(h["loss"]) for h in hist)


class TestCheckpoint:
    def _trained(self, train_setup, steps=2):
        model = PretrainModel.build(desk_cfg(), train_setup["codebook"], seed=1)
        cfg = train_cfg(total_steps=steps)
        trainer = Trainer(model, cfg, train_setup["labels"], train_setup["dir"])
        trainer.run(train_setup["entries"])
        return model, trainer, cfg

    def test_round_trip_bit_exact(self, train_setup, tmp_path):
        model, trainer, cfg = self._trained(train_setup)
        path = tmp_path / "ck.msrh"
        save_checkpoint(path, model, trainer.adam, trainer.step, cfg)
        loaded, adam, step, _ = load_checkpoint(path)
        assert step == trainer.step
        assert adam.t == trainer.adam.t
        old, new = model.params(), loaded.params()
        assert set(old) == set(new)
        for k in old:
            assert np.array_equal(old[k], new[k]), k
        for k in trainer.adam.m:
            assert np.array_equal(trainer.adam.m[k], adam.m[k])
            assert np.array_equal(trainer.adam.v[k], adam.v[k])

    def test_forward_identical_after_reload(self, train_setup, tmp_path):
        model, trainer, cfg = self._trained(train_setup)
        path = tmp_path / "ck.msrh"
        save_checkpoint(path, model, trainer.adam, trainer.step, cfg)
        loaded, _, _, _ = load_checkpoint(path)
        entry = train_setup["entries"][0]
        w = dsp.read_wav(train_setup["dir"] / entry.path)
        assert np.array_equal(
            model.forward_hidden(w)[-1], loaded.forward_hidden(w)[-1]
        )

    def test_corrupt_magic(self, train_setup, tmp_path):
        model, trainer, cfg = self._trained(train_setup)
        path = tmp_path / "ck.msrh"
        save_checkpoint(path, model, trainer.adam, trainer.step, cfg)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated_payload(self, train_setup, tmp_path):
        model, trainer, cfg = self._trained(train_setup)
        path = tmp_path / "ck.msrh"
        save_checkpoint(path, model, trainer.adam, trainer.step, cfg)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 257])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_version_mismatch(self, train_setup, tmp_path):
        model, trainer, cfg = self._trained(train_setup)
        path = tmp_path / "ck.msrh"
        save_checkpoint(path, model, trainer.adam, trainer.step, cfg)
        blob = bytearray(path.read_bytes())
        blob[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_resume_matches_continuous(self, train_setup, tmp_path):
        cfg = train_cfg(total_steps=6)
        continuous = PretrainModel.build(desk_cfg(), train_setup["codebook"], seed=1)
        hist_full = Trainer(
            continuous, cfg, train_setup["labels"], train_setup["dir"]
        ).run(train_setup["entries"])

        partial = PretrainModel.build(desk_cfg(), train_setup["codebook"], seed=1)
        trainer = Trainer(partial, cfg, train_setup["labels"], train_setup["dir"])
        trainer.run(train_setup["entries"], steps=4)
        path = tmp_path / "ck.msrh"
        save_checkpoint(path, partial, trainer.adam, trainer.step, cfg)

        resumed_model, adam, step, resumed_cfg = load_checkpoint(path)
        resumed = Trainer(
            resumed_model, resumed_cfg, train_setup["labels"], train_setup["dir"],
            step=step, adam=adam,
        )
        hist_tail = resumed.run(train_setup["entries"])
        full_tail = [h["loss"] for h in hist_full[4:]]
        resumed_tail = [h["loss"] for h in hist_tail]
        assert resumed_tail == pytest.approx(full_tail, rel=1e-6)


class TestOverheadReport:
    def test_base_like_marginal_under_five_percent(self):
        report = overhead_report()
        assert report["marginal_percent_per_added_rate"] <= 5.0
        assert report["encoder_params"] == 85054464  # 12 x 768/3072 layers

    def test_desk_overhead_exceeds_base_like(self):
        base = overhead_report()
        desk = overhead_report(ModelConfig())
        assert (
            desk["marginal_percent_per_added_rate"]
            > base["marginal_percent_per_added_rate"]
        )

    def test_single_rate_zero_added(self):
        report = overhead_report(ModelConfig(rates=(16000,)))
        assert report["total"] == report["baseline_total"]
        assert report["marginal_percent_per_added_rate"] == 0.0

    def test_branch_rows_cover_all_rates(self):
        report = overhead_report(BASE_LIKE)
        assert [r["rate_hz"] for r in report["branches"]] == [16000, 22050, 24000, 48000]
        for row in report["branches"]:
            assert row["branch_params"] > 0
