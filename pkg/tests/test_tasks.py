import numpy as np
import pytest

from etd_lab.tasks import (
    FALLBACK,
    PAD,
    SYMBOLS,
    VOCAB_SIZE,
    ExampleBatch,
    Instance,
    TaskSpec,
    decode_ids,
    encode_text,
    eval_chain,
    gen_copy_reverse,
    gen_k_hop,
    gen_mod_chain,
    load_corpus,
    solve_k_hop,
    solve_mod_chain,
    to_batch,
)


def brute_chain(prompt: str, p: int) -> int:
    # independent evaluator: walk the string character by character
    body = prompt[:-1]
    acc = SYMBOLS.index(body[0])
    i = 1
    while i < len(body):
        op, b = body[i], SYMBOLS.index(body[i + 1])
        acc = {"+": acc + b, "-": acc - b, "*": acc * b}[op] % p
        i += 2
    return acc


def test_hand_arithmetic():
    assert eval_chain([3, 4], "+", 7) == 0
    assert solve_mod_chain("3+4=", 7) == 0
    assert eval_chain([2, 3, 4], "-*", 5) == 1  # (2-3)*4 = -4 = 1 mod 5


@pytest.mark.parametrize("depth,p", [(1, 7), (3, 5), (6, 11), ((1, 5), 13)])
def test_mod_chain_labels_match_oracle(depth, p):
    insts = gen_mod_chain(4, depth, p, 300)
    for inst in insts:
        assert SYMBOLS.index(inst.answer) == brute_chain(inst.prompt, p)
        n_ops = sum(inst.prompt.count(o) for o in "+-*")
        lo, hi = (depth, depth) if isinstance(depth, int) else depth
        assert lo <= n_ops <= hi
        assert len(inst.prompt) == 2 * n_ops + 2  # generator chain length linear in depth


def test_mod_chain_determinism_and_errors():
    a = gen_mod_chain(9, 3, 5, 50)
    assert a == gen_mod_chain(9, 3, 5, 50)
    assert a != gen_mod_chain(10, 3, 5, 50)
    with pytest.raises(ValueError):
        gen_mod_chain(0, 0, 5, 1)
    with pytest.raises(ValueError):
        gen_mod_chain(0, 2, 1, 1)
    with pytest.raises(ValueError):
        gen_mod_chain(0, 1, 2, 100, exclude={i.text for i in gen_mod_chain(1, 1, 2, 100)} | {
            f"{a}{o}{b}={eval_chain([a, b], o, 2)}" for a in range(2) for b in range(2) for o in "+-*"})


def test_k_hop_oracle_and_fixed_point():
    for inst in gen_k_hop(3, 4, 8, 200):
        assert solve_k_hop(inst.prompt) == inst.answer
    one = gen_k_hop(5, 1, 6, 50)
    for inst in one:
        table = dict(p for p in inst.prompt.split("|")[0].split(","))
        assert table[inst.prompt.split("|")[1][0]] == inst.answer
    rng = np.random.default_rng(0)
    from etd_lab.tasks import k_hop_instance

    for h in (1, 3, 7):
        inst = k_hop_instance(rng, h, 6, table=np.arange(6))
        assert inst.answer == inst.prompt.split("|")[1][0]


def test_copy_reverse_answer():
    for inst in gen_copy_reverse(0, 5, 4, 20):
        assert inst.answer == inst.prompt[:-1][::-1][0]


def test_splits_disjoint_exhaustive():
    spec = TaskSpec(kind="mod_chain", depth=2, modulus=3, n_train=150, n_test=60, seed=3)
    train = {i.text for i in spec.train_instances()}
    test = {i.text for i in spec.test_instances()}
    assert not train & test
    tr, te = spec.splits()
    assert len(tr) == 150 and len(te) == 60 and tr.inputs.shape[1] == te.inputs.shape[1]


def test_batch_mask_supervises_answer_only():
    b = to_batch([Instance("1+2=", "3"), Instance("4=", "4")])
    assert b.inputs.shape == (2, 4)
    assert b.mask.sum(axis=1).tolist() == [1, 1]
    assert b.targets[0, 3] == ord("3") and b.mask[0, 3]
    assert b.targets[1, 1] == ord("4") and b.mask[1, 1]
    assert ((b.targets >= 0) & (b.targets < VOCAB_SIZE)).all()
    assert decode_ids(b.inputs[0]) + chr(b.targets[0, 3]) == "1+2=3"


def test_jsonl_round_trip(tmp_path):
    b = to_batch(gen_mod_chain(0, (1, 3), 5, 20), width=8)
    b.to_jsonl(tmp_path / "d.jsonl")
    c = ExampleBatch.from_jsonl(tmp_path / "d.jsonl")
    m = c.inputs.shape[1]
    assert np.array_equal(c.mask, b.mask[:, :m])
    assert np.array_equal(c.targets[c.mask], b.targets[b.mask])


def test_corpus_windows_and_round_trip(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("abcdefgh" * 2, encoding="utf-8")
    w = load_corpus(f, 8)
    assert w.shape == (2, 8)
    assert decode_ids(w[0]) == "abcdefgh"
    s = "Plain ASCII text, 123!"
    assert decode_ids(encode_text(s)) == s


def test_corpus_fallback_and_errors(tmp_path):
    f = tmp_path / "u.txt"
    f.write_bytes(b"ab\xc3\xa9d")
    w = load_corpus(f, 5)
    assert w[0].tolist() == [97, 98, FALLBACK, FALLBACK, 100]
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path / "missing.txt", 4)
    (tmp_path / "e.txt").write_bytes(b"")
    with pytest.raises(OSError):
        load_corpus(tmp_path / "e.txt", 4)


def test_taskspec_round_trip_and_bad_kind():
    spec = TaskSpec(kind="k_hop", depth=3, domain=5, train_depth=(1, 3))
    assert TaskSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        TaskSpec(kind="nope")
