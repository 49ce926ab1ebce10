"""Unit tests for tokenization, prompt pools, learned tokens, NeTI and conditioning.

Most cases run through IdentityTextEncoder so the post-encoder sequence equals
the injected input sequence and can be checked elementwise.
"""
import logging

import pytest
import torch

from app.core.archive import write_archive
from app.core.errors import ConditioningError, FormatError, InitError, StepIndexError, UnknownTokenError
from app.embedders.conditioning import embed_prompt, extract_contextual, plain_bundle, stack_contexts
from app.embedders.neti import NeTIEmbedder, neti_forward
from app.embedders.tokenizer import ATTRACTOR_TOKEN, SUBJECT_TOKEN, UNK, Tokenizer, build_vocabulary
from app.embedders.tokens import (
    LearnedTokens,
    Method,
    TokenTable,
    export_learned_tokens,
    load_learned_tokens,
    register_tokens,
)
from app.schemas.dataset import ImageRecord, SubjectRecord
from app.services.prompts import build_prompt_pools

# ─── Helpers ──────────────────────────────────────────────────────────────────

def _subject(n_train: int = 5, supercategory: str = "dog") -> SubjectRecord:
    return SubjectRecord(id="s00", supercategory=supercategory,
                         train=[ImageRecord(image=f"train/{k}.png", mask=f"train/{k}_mask.png") for k in range(n_train)])


def _neti(dim: int = 8, T: int = 50, L: int = 3, seed: int = 0) -> NeTIEmbedder:
    neti = NeTIEmbedder(dim, T, L, hidden_dim=16).to(torch.float64)
    neti.reset_parameters(torch.Generator().manual_seed(seed))
    return neti


# ─── Tokenizer ────────────────────────────────────────────────────────────────

class TestTokenizer:
    def test_pseudo_token_positions(self):
        tok = Tokenizer(["a", "photo", "of", "."], context_length=10)
        out = tok("A photo of <v*>.")
        assert out.tokens[:6] == ("<bos>", "a", "photo", "of", SUBJECT_TOKEN, ".")
        assert out.pseudo_positions == {SUBJECT_TOKEN: 4}
        assert len(out.ids) == 10 and out.length == 7

    def test_unknown_words_map_to_unk(self):
        tok = Tokenizer(["a"], context_length=6)
        assert tok("a zebra").ids[2] == tok.token_id(UNK)

    def test_vocabulary_miss_warns_once_per_word(self, caplog):
        tok = Tokenizer(["a"], context_length=6)
        with caplog.at_level(logging.WARNING, logger="app.embedders.tokenizer"):
            tok("a zebra")
            tok("a zebra")
        misses = [r for r in caplog.records if "zebra" in r.getMessage()]
        assert len(misses) == 1
        assert misses[0].levelno == logging.WARNING

    def test_truncating_pseudo_token_raises(self):
        tok = Tokenizer(["a"], context_length=4)
        with pytest.raises(ConditioningError, match="truncated"):
            tok("a a a <v*>")

    def test_duplicate_pseudo_token_raises(self):
        with pytest.raises(ConditioningError, match="more than once"):
            Tokenizer(["a"], context_length=8)("<v*> a <v*>")

    def test_vocabulary_covers_manifest_words(self, toy_manifest):
        vocab = build_vocabulary(toy_manifest)
        assert vocab == sorted(vocab)
        for subject in toy_manifest.subjects:
            assert subject.supercategory in vocab
        assert SUBJECT_TOKEN not in vocab and UNK not in vocab


# ─── Prompt pools ─────────────────────────────────────────────────────────────

class TestPromptPools:
    def test_background_pool_example(self):
        pools = build_prompt_pools("dog")
        assert "a photo of a dog in the <A*>." in pools.background_pool

    def test_pool_sizes_and_invariants(self):
        pools = build_prompt_pools("dog")
        assert len(pools.subject_pool) == 15
        assert len(pools.joint_pool) == 15
        assert pools.violations() == []

    def test_empty_supercategory(self):
        with pytest.raises(ValueError):
            build_prompt_pools("  ")


# ─── register_tokens ──────────────────────────────────────────────────────────

class TestRegisterTokens:
    def test_one_subject_vector_and_one_attractor_per_image(self, identity_encoder):
        table = register_tokens(_subject(5), identity_encoder)
        assert table.subject.shape == (8,)
        assert len(table.attractors) == 5
        torch.testing.assert_close(table.subject, identity_encoder.word_embedding("dog"))

    def test_attractors_are_distinct(self, identity_encoder):
        table = register_tokens(_subject(3), identity_encoder)
        a, b, c = (table.attractors[k] for k in sorted(table.attractors))
        assert not torch.equal(a, b) and not torch.equal(b, c)

    def test_random_init_is_deterministic(self, identity_encoder):
        t1 = register_tokens(_subject(), identity_encoder, init="random", seed=4)
        t2 = register_tokens(_subject(), identity_encoder, init="random", seed=4)
        assert torch.equal(t1.subject, t2.subject)
        for key in t1.attractors:
            assert torch.equal(t1.attractors[key], t2.attractors[key])

    def test_dimension_mismatch(self, identity_encoder):
        with pytest.raises(InitError, match="dimension"):
            register_tokens(_subject(), identity_encoder, d=4)

    def test_unknown_supercategory(self, identity_encoder):
        with pytest.raises(InitError, match="not in the encoder vocabulary"):
            register_tokens(_subject(supercategory="zebra"), identity_encoder)

    def test_table_dimension_checked_at_embed_time(self, identity_encoder):
        table = TokenTable(subject=torch.zeros(4, dtype=torch.float64))
        with pytest.raises(InitError):
            embed_prompt("a photo of <v*>.", table, identity_encoder)

    def test_unknown_attractor(self, identity_encoder):
        table = register_tokens(_subject(), identity_encoder)
        with pytest.raises(UnknownTokenError):
            table.attractor("train/99.png")


# ─── NeTI ─────────────────────────────────────────────────────────────────────

class TestNeTI:
    def test_zero_network_gives_zero_vector(self):
        neti = _neti()
        with torch.no_grad():
            for p in neti.parameters():
                p.zero_()
        assert torch.equal(neti_forward(neti, 7, 2), torch.zeros(8, dtype=torch.float64))

    def test_deterministic(self):
        neti = _neti()
        assert torch.equal(neti_forward(neti, 0, 0), neti_forward(neti, 0, 0))

    def test_constant_output(self):
        neti = _neti()
        vec = torch.arange(8, dtype=torch.float64)
        neti.constant(vec)
        for t, l in [(0, 0), (49, 2), (13, 1)]:
            assert torch.equal(neti_forward(neti, t, l), vec)

    def test_out_of_range(self):
        neti = _neti(T=10, L=2)
        with pytest.raises(StepIndexError):
            neti_forward(neti, 10, 0)
        with pytest.raises(StepIndexError):
            neti_forward(neti, 0, 2)

    def test_gradcheck_output_norm(self):
        neti = _neti(dim=4, L=2)
        t, l = torch.tensor([5]), torch.tensor([1])
        w0 = neti.net[0].weight.detach().clone().requires_grad_(True)

        def norm_of_output(weight: torch.Tensor) -> torch.Tensor:
            feats = neti.encode_inputs(t, l)
            hidden = torch.nn.functional.silu(feats @ weight.T + neti.net[0].bias)
            return neti.net[2](hidden).norm()

        assert torch.autograd.gradcheck(norm_of_output, (w0,), eps=1e-5, atol=1e-6, rtol=1e-4)


# ─── embed_prompt / extract_contextual ────────────────────────────────────────

class TestConditioning:
    def test_ti_injection_locality(self, identity_encoder):
        table = register_tokens(_subject(), identity_encoder)
        bundle = embed_prompt("a photo of <v*>.", table, identity_encoder)
        plain = plain_bundle("a photo of dog.", identity_encoder)
        pos = bundle.token_positions[SUBJECT_TOKEN]
        seq, ref = bundle.sequences[0], plain.sequences[0]
        assert torch.equal(seq[pos], table.subject)
        keep = [i for i in range(seq.shape[0]) if i != pos]
        assert torch.equal(seq[keep], ref[keep])

    def test_identity_encoder_returns_injected_vector(self, identity_encoder):
        table = register_tokens(_subject(), identity_encoder)
        bundle = embed_prompt("<v*>", table, identity_encoder)
        assert torch.equal(extract_contextual(bundle, SUBJECT_TOKEN), table.subject)

    def test_attractor_without_image_id(self, identity_encoder):
        table = register_tokens(_subject(), identity_encoder)
        with pytest.raises(UnknownTokenError, match="image_id"):
            embed_prompt("<A*>", table, identity_encoder)

    def test_attractor_injected_for_image(self, identity_encoder):
        table = register_tokens(_subject(), identity_encoder)
        bundle = embed_prompt("a photo of a dog in the <A*>.", table, identity_encoder, image_id="train/2.png")
        assert torch.equal(extract_contextual(bundle, ATTRACTOR_TOKEN), table.attractors["train/2.png"])

    def test_missing_token_query(self, identity_encoder):
        table = register_tokens(_subject(), identity_encoder)
        bundle = embed_prompt("a photo of <v*>.", table, identity_encoder)
        with pytest.raises(UnknownTokenError):
            extract_contextual(bundle, ATTRACTOR_TOKEN)

    def test_neti_layers_differ_only_at_subject_slot(self, identity_encoder):
        table = register_tokens(_subject(), identity_encoder)
        neti = _neti(T=50, L=3)
        bundle = embed_prompt("a photo of <v*>.", table, identity_encoder, method=Method.NETI, t=10, neti=neti)
        assert bundle.layer_count == 3
        pos = bundle.token_positions[SUBJECT_TOKEN]
        diff = (bundle.layer(0) - bundle.layer(1)).abs().sum(-1)
        assert diff[pos] > 0
        assert torch.count_nonzero(diff) == 1
        torch.testing.assert_close(bundle.layer(1)[pos], neti_forward(neti, 10, 1))

    def test_neti_requires_timestep_and_network(self, identity_encoder):
        table = register_tokens(_subject(), identity_encoder)
        with pytest.raises(ConditioningError, match="NeTIEmbedder"):
            embed_prompt("<v*>", table, identity_encoder, method=Method.NETI, t=0)
        with pytest.raises(ConditioningError, match="timestep"):
            embed_prompt("<v*>", table, identity_encoder, method=Method.NETI, neti=_neti())

    def test_neti_layer_out_of_range(self, identity_encoder):
        table = register_tokens(_subject(), identity_encoder)
        bundle = embed_prompt("<v*>", table, identity_encoder, method=Method.NETI, t=0, neti=_neti(L=2))
        with pytest.raises(ConditioningError):
            bundle.layer(2)
        with pytest.raises(ConditioningError):
            stack_contexts([bundle], layer_count=3)

    def test_contextual_vectors_depend_on_surrounding_words(self, tiny_backend, toy_manifest):
        encoder = tiny_backend.text_encoder
        table = register_tokens(toy_manifest.subjects[0], encoder)
        a = extract_contextual(embed_prompt("a photo of <v*>.", table, encoder), SUBJECT_TOKEN)
        b = extract_contextual(embed_prompt("a dark photo of the <v*>.", table, encoder), SUBJECT_TOKEN)
        assert not torch.allclose(a, b)

    def test_plain_bundle_rejects_pseudo_tokens(self, identity_encoder):
        with pytest.raises(ConditioningError):
            plain_bundle("a photo of <v*>", identity_encoder)


# ─── Learned-token archive ────────────────────────────────────────────────────

class TestLearnedTokenArchive:
    def test_round_trip_with_neti(self, identity_encoder, tmp_path):
        table = register_tokens(_subject(2), identity_encoder)
        neti = _neti(L=2)
        tokens = LearnedTokens(method=Method.NETI, subject_id="s00", table=table, neti=neti, layer_count=2)
        loaded = load_learned_tokens(export_learned_tokens(tokens, tmp_path / "tokens.ckpt"))
        assert loaded.method == Method.NETI and loaded.layer_count == 2
        assert torch.equal(loaded.table.subject, table.subject)
        assert loaded.neti is not None
        assert torch.equal(neti_forward(loaded.neti, 3, 1), neti_forward(neti, 3, 1))

    def test_export_is_byte_stable(self, identity_encoder, tmp_path):
        table = register_tokens(_subject(2), identity_encoder)
        tokens = LearnedTokens(method=Method.TI, subject_id="s00", table=table, neti=None, layer_count=1)
        a = export_learned_tokens(tokens, tmp_path / "a.ckpt").read_bytes()
        b = export_learned_tokens(tokens, tmp_path / "b.ckpt").read_bytes()
        assert a == b

    def test_malformed_payload(self, tmp_path):
        path = write_archive({"method": "ti"}, tmp_path / "bad.ckpt", kind="learned-tokens")
        with pytest.raises(FormatError):
            load_learned_tokens(path)
