import numpy as np
import pytest
import torch

from advasr.corpus import (
    BLANK_ID,
    EOS_ID,
    NUM_RESERVED,
    PAD_ID,
    SOS_ID,
    CorpusConfig,
    SpecAugmentPolicy,
    Vocab,
    apply_freq_mask,
    apply_time_mask,
    corpus_fingerprint,
    generate_corpus,
    load_corpus,
    make_batch,
    save_corpus,
    spec_augment,
    synthesize_features,
)


class TestVocab:
    def test_reserved_layout(self):
        v = Vocab.build(3)
        assert v.symbols[:NUM_RESERVED] == ("<blank>", "<pad>", "<sos>", "<eos>")
        assert (v.blank_id, v.pad_id, v.sos_id, v.eos_id) == (
            BLANK_ID,
            PAD_ID,
            SOS_ID,
            EOS_ID,
        )
        assert v.size == NUM_RESERVED + 3
        assert list(v.content_ids) == [4, 5, 6]

    def test_tokenize_roundtrip(self):
        v = Vocab.build(5)
        ids = v.tokenize("abcde")
        assert ids == [4, 5, 6, 7, 8]
        assert v.detokenize(ids) == "abcde"

    def test_tokenize_rejects_unknown_symbol(self):
        with pytest.raises(ValueError, match="not in vocabulary"):
            Vocab.build(2).tokenize("z")

    def test_detokenize_rejects_reserved_ids(self):
        with pytest.raises(ValueError, match="reserved"):
            Vocab.build(2).detokenize([BLANK_ID])

    def test_needs_at_least_one_content_token(self):
        with pytest.raises(ValueError):
            Vocab.build(0)


class TestConfigValidation:
    def test_negative_noise_rejected(self):
        with pytest.raises(ValueError, match="noise_std"):
            CorpusConfig(noise_std=-0.1)

    def test_swapped_length_bounds_rejected(self):
        with pytest.raises(ValueError, match="min_transcript_len"):
            CorpusConfig(min_transcript_len=6, max_transcript_len=3)

    def test_narrow_features_rejected(self):
        with pytest.raises(ValueError, match="feature_dim"):
            CorpusConfig(feature_dim=4)

    def test_infeasible_frame_budget_rejected(self):
        # 2 tokens at 5 frames each subsample to a single position
        with pytest.raises(ValueError, match="infeasible"):
            CorpusConfig(min_transcript_len=2, max_transcript_len=2, min_frames_per_token=5)


class TestGeneration:
    def test_split_sizes_and_ids(self, tiny_splits, tiny_corpus_config):
        assert len(tiny_splits.train) == tiny_corpus_config.train_size
        assert len(tiny_splits.dev) == tiny_corpus_config.dev_size
        assert len(tiny_splits.test) == tiny_corpus_config.test_size
        ids = [u.id for s in ("train", "dev", "test") for u in tiny_splits.split(s)]
        assert len(set(ids)) == len(ids)

    def test_transcripts_within_bounds_and_content_only(self, tiny_splits, tiny_corpus_config):
        cfg = tiny_corpus_config
        for u in tiny_splits.train + tiny_splits.dev + tiny_splits.test:
            assert cfg.min_transcript_len <= len(u.transcript) <= cfg.max_transcript_len
            assert all(t in tiny_splits.vocab.content_ids for t in u.transcript)

    def test_no_adjacent_repeats(self, tiny_splits):
        for u in tiny_splits.train:
            assert all(a != b for a, b in zip(u.transcript, u.transcript[1:]))

    def test_frame_counts_within_bounds(self, tiny_splits, tiny_corpus_config):
        cfg = tiny_corpus_config
        for u in tiny_splits.train:
            lo = len(u.transcript) * cfg.min_frames_per_token
            hi = len(u.transcript) * cfg.max_frames_per_token
            assert lo <= u.num_frames <= hi
            assert u.features.shape == (u.num_frames, cfg.feature_dim)
            assert u.features.dtype == np.float32

    def test_identical_configs_identical_corpora(self, tiny_corpus_config):
        a = generate_corpus(tiny_corpus_config)
        b = generate_corpus(tiny_corpus_config)
        assert corpus_fingerprint(a) == corpus_fingerprint(b)

    def test_seed_changes_corpus(self, tiny_corpus_config):
        from dataclasses import replace

        other = generate_corpus(replace(tiny_corpus_config, seed=99))
        assert corpus_fingerprint(other) != corpus_fingerprint(generate_corpus(tiny_corpus_config))

    def test_noiseless_features_are_exact_prototype_stacks(self):
        cfg = CorpusConfig(
            num_content_tokens=3,
            feature_dim=8,
            min_transcript_len=2,
            max_transcript_len=2,
            min_frames_per_token=6,
            max_frames_per_token=6,
            noise_std=0.0,
            seed=5,
            train_size=4,
            dev_size=1,
            test_size=1,
        )
        splits = generate_corpus(cfg)
        rng = np.random.default_rng(cfg.seed)
        prototypes = rng.normal(0.0, 1.0, size=(3, 8)).astype(np.float32)
        for u in splits.train:
            expected = np.concatenate(
                [np.repeat(prototypes[t - NUM_RESERVED][None, :], 6, axis=0) for t in u.transcript]
            )
            np.testing.assert_array_equal(u.features, expected)


class TestSynthesizeFeatures:
    def test_mismatched_frame_counts_rejected(self):
        protos = np.zeros((2, 8))
        with pytest.raises(ValueError, match="one frame count per"):
            synthesize_features([4, 5], protos, [3], 0.0, np.random.default_rng(0))

    def test_zero_noise_is_deterministic_stack(self):
        protos = np.arange(16, dtype=np.float64).reshape(2, 8)
        feats = synthesize_features([4, 5], protos, [2, 3], 0.0, np.random.default_rng(0))
        assert feats.shape == (5, 8)
        np.testing.assert_array_equal(feats[:2], np.repeat(protos[0][None], 2, 0).astype(np.float32))
        np.testing.assert_array_equal(feats[2:], np.repeat(protos[1][None], 3, 0).astype(np.float32))


class TestBatching:
    def test_padding_layout(self, tiny_splits):
        items = sorted(tiny_splits.train, key=lambda u: u.num_frames)[:3]
        batch = make_batch(items, tiny_splits.vocab)
        t_max = max(u.num_frames for u in items)
        l_max = max(len(u.transcript) for u in items)
        assert batch.features.shape == (3, t_max, items[0].features.shape[1])
        assert batch.targets.shape == (3, l_max)
        assert batch.real_onehot.shape == (3, l_max, tiny_splits.vocab.size)
        for b, u in enumerate(items):
            assert int(batch.feature_lengths[b]) == u.num_frames
            assert int(batch.target_lengths[b]) == len(u.transcript)
            assert torch.all(batch.features[b, u.num_frames :] == 0)
            assert torch.all(batch.targets[b, len(u.transcript) :] == PAD_ID)

    def test_onehot_rows_match_targets_and_padding_rows_are_zero(self, tiny_splits):
        batch = make_batch(tiny_splits.train[:4], tiny_splits.vocab)
        for b in range(4):
            n = int(batch.target_lengths[b])
            rows = batch.real_onehot[b]
            assert torch.all(rows[:n].sum(dim=-1) == 1)
            assert torch.all(rows[n:] == 0)
            assert torch.all(rows[:n].argmax(dim=-1) == batch.targets[b, :n])

    def test_empty_batch_rejected(self, tiny_splits):
        with pytest.raises(ValueError, match="empty"):
            make_batch([], tiny_splits.vocab)


class TestSpecAugment:
    def test_policy_rejects_negative_values(self):
        with pytest.raises(ValueError):
            SpecAugmentPolicy(num_freq_masks=-1)

    def test_freq_mask_zeroes_requested_columns(self):
        feats = np.ones((4, 6), dtype=np.float32)
        out = apply_freq_mask(feats, start=1, width=2)
        assert np.all(out[:, 1:3] == 0)
        assert np.all(out[:, :1] == 1) and np.all(out[:, 3:] == 1)
        assert np.all(feats == 1), "input must not be mutated"

    def test_time_mask_zeroes_requested_rows(self):
        feats = np.ones((5, 4), dtype=np.float32)
        out = apply_time_mask(feats, start=3, width=2)
        assert np.all(out[3:5] == 0) and np.all(out[:3] == 1)

    def test_masked_cells_are_zero_and_shape_unchanged(self, tiny_splits):
        policy = SpecAugmentPolicy(num_freq_masks=2, max_freq_width=3, num_time_masks=2, max_time_width=4)
        u = tiny_splits.train[0]
        out = spec_augment(u.features, policy, np.random.default_rng(3))
        assert out.shape == u.features.shape
        changed = out != u.features
        assert np.all(out[changed] == 0)

    def test_same_rng_state_same_masks(self, tiny_splits):
        policy = SpecAugmentPolicy()
        u = tiny_splits.train[1]
        a = spec_augment(u.features, policy, np.random.default_rng(9))
        b = spec_augment(u.features, policy, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_zero_width_policy_is_identity(self, tiny_splits):
        policy = SpecAugmentPolicy(num_freq_masks=0, max_freq_width=0, num_time_masks=0, max_time_width=0)
        u = tiny_splits.train[2]
        np.testing.assert_array_equal(spec_augment(u.features, policy, np.random.default_rng(0)), u.features)


class TestSerialization:
    def test_roundtrip_preserves_everything(self, tiny_splits, tmp_path):
        path = tmp_path / "corpus.jsonl"
        save_corpus(path, tiny_splits)
        loaded = load_corpus(path)
        assert corpus_fingerprint(loaded) == corpus_fingerprint(tiny_splits)
        assert loaded.config == tiny_splits.config
        assert loaded.vocab == tiny_splits.vocab

    def test_format_tag_checked(self, tiny_splits, tmp_path):
        path = tmp_path / "corpus.jsonl"
        save_corpus(path, tiny_splits)
        lines = path.read_text().splitlines()
        lines[0] = lines[0].replace("advasr-corpus-v1", "bogus-v0")
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match="unsupported corpus format"):
            load_corpus(path)

    def test_fingerprint_sensitive_to_features(self, tiny_splits):
        import copy
        from advasr.corpus import CorpusSplits, Utterance

        mutated = copy.deepcopy(tiny_splits.train)
        feats = mutated[0].features.copy()
        feats[0, 0] += 1.0
        mutated[0] = Utterance(mutated[0].id, feats, mutated[0].transcript)
        other = CorpusSplits(
            vocab=tiny_splits.vocab,
            config=tiny_splits.config,
            train=mutated,
            dev=tiny_splits.dev,
            test=tiny_splits.test,
        )
        assert corpus_fingerprint(other) != corpus_fingerprint(tiny_splits)
