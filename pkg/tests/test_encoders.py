import numpy as np
import pytest
import torch

from cascade_match import numerics as nx
from cascade_match.encoders import (HeavyEncoder, LightEncoder, encode_heavy, encode_light,
                                    encode_many, pad_batch)
from cascade_match.graphstore import Document


def _objective(enc, tokens):
    w = torch.randn(tokens.shape[0], enc.dim, generator=torch.Generator().manual_seed(1),
                    dtype=torch.float64)
    return lambda p: (enc(tokens) * w).sum()


@pytest.mark.parametrize("make", [
    lambda s: LightEncoder(7, dim=4, window=3, dtype=torch.float64, seed=s),
    lambda s: HeavyEncoder(7, dim=4, layers=1, heads=2, max_len=5, ffn_mult=2,
                           dtype=torch.float64, seed=s),
], ids=["light", "heavy"])
def test_encoder_gradients(make):
    rng = np.random.default_rng(0)
    for s in range(5):
        enc = make(s)
        tokens = torch.as_tensor(rng.integers(1, 7, size=(2, 4)))
        tokens[1, 3] = 0  # one padded slot
        assert nx.grad_check(_objective(enc, tokens), nx.ParamStore.from_module(enc)) <= 1e-4


def test_padding_does_not_change_light_encoding():
    enc = LightEncoder(9, dim=8, dtype=torch.float64, seed=0)
    doc = Document("a", (3, 4, 5))
    alone = encode_light(doc, enc)
    padded = enc(pad_batch([doc], length=10))[0]
    torch.testing.assert_close(alone, padded, rtol=1e-12, atol=1e-12)


def test_light_attention_sums_to_one_and_ignores_pad():
    enc = LightEncoder(9, dim=8, dtype=torch.float64, seed=0)
    with torch.no_grad():
        r, alpha, c = enc(pad_batch([(1, 2), (3, 4, 5, 6)]), return_attention=True)
    np.testing.assert_allclose(alpha.sum(-1).numpy(), 1.0, atol=1e-12)
    assert float(alpha[0, 2:].abs().sum()) == 0.0
    assert r.shape == (2, 8) and c.shape == (2, 4, 8)


def test_heavy_padding_invariance_and_length_check():
    enc = HeavyEncoder(9, dim=8, heads=2, max_len=6, dtype=torch.float64, seed=0)
    doc = Document("a", (1, 2, 3))
    torch.testing.assert_close(encode_heavy(doc, enc), enc(pad_batch([doc], 6))[0],
                               rtol=1e-10, atol=1e-10)
    with pytest.raises(nx.DimensionError):
        encode_heavy(Document("b", tuple(range(1, 8))), enc)


def test_out_of_vocab_token():
    with pytest.raises(IndexError):
        LightEncoder(4, dim=4)(torch.tensor([[5]]))


def test_encode_many_matches_single():
    enc = LightEncoder(20, dim=8, dtype=torch.float64, seed=2)
    docs = [Document(str(i), tuple(range(1, 2 + i % 5))) for i in range(7)]
    many = encode_many(docs, enc, batch_size=3)
    for d, row in zip(docs, many):
        torch.testing.assert_close(encode_light(d, enc), row, rtol=1e-12, atol=1e-12)


def test_seeded_init_is_deterministic():
    a, b = HeavyEncoder(10, dim=8, heads=2, seed=5), HeavyEncoder(10, dim=8, heads=2, seed=5)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
