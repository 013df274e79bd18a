"""Smoke test for the `retriever` extension module.

Build it first:  pip install --no-build-isolation ./crates/python
"""

import tempfile

import retriever as r

CONFIG = """
[encoder]
num_layers = 1
model_dim = 16
num_heads = 2
ffn_dim = 32

[decoder]
model_dim = 16
num_heads = 2

[training]
batch_size = 8
learning_rate = 0.003
"""


def main():
    corpus = r.Corpus.synthetic(objects=12, turns=40, seed=1)
    train, test = corpus.split(32)
    model = r.Model.train(train, CONFIG, seed=0, steps=30)
    print(f"loss {model.losses[0]:.3f} -> {model.losses[-1]:.3f}")
    assert model.losses[-1] < model.losses[0]

    with tempfile.TemporaryDirectory() as d:
        model.save(f"{d}/model.ckpt")
        loaded = r.Model.load(f"{d}/model.ckpt")

    turn = test.turns()[0]
    obj = test.object(turn["referred_object_id"])
    pool = test.pools(pool_size=5, seed=2)[0]
    order, rank = loaded.rank(turn["user_utterance"], obj, pool["candidates"], pool["true_index"])
    print("order", order, "rank of truth", rank)

    report = loaded.evaluate(test, pool_size=5, seed=2)
    print(report)
    assert report["n"] == len(test)
    assert abs(r.mrr([1, 2]) - 0.75) < 1e-12
    print("ok")


if __name__ == "__main__":
    main()
