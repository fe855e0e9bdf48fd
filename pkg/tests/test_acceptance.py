"""Acceptance suite: one PASS/FAIL line per criterion, printed to the terminal."""
import itertools
import time
from collections import Counter

import numpy as np
import pytest
import torch

from cli_data import make_workspace, subcommand_runs
from conftest import fd_check
from lowres_nlu.augment import INF, MaskPlan, ShuffleSpec, mask_count, sample_permutation, shuffle_order, span_mask, \
    token_mask
from lowres_nlu.coach import CoachConfig, CoachExample, build_from_world, template_losses, train_coach
from lowres_nlu.embed_align import preprocess, random_orthogonal, refine, solve_mapping
from lowres_nlu.encoders import CRF, MultiHeadAttention, OrtConfig, TransformerEncoder, ort_encode
from lowres_nlu.harness.cli import main
from lowres_nlu.harness.metrics import bio_f1
from lowres_nlu.parse_repr import decode_flat, encode_flat, parse_hierarchical
from lowres_nlu.synthetic import ToyGrammar, ToySlotWorld, random_tree
from lowres_nlu.x2parser import X2Config, build_model, exact_match_rate, make_batch, parse_utterance, train, x2_loss
from lowres_nlu.xling_reg import Adversary, alvm_losses, label_reg_loss


@pytest.fixture
def verdict(capsys):
    def report(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return report


def test_criterion_01_codec_round_trip(verdict):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(10_000):
        tree = random_tree(rng, max_depth=4, max_fertility=3)
        bad += decode_flat(encode_flat(tree, max_fertility=3), tree.tokens) != tree
    secs = time.perf_counter() - t0
    verdict(1, bad == 0 and secs < 30, f"{10_000 - bad}/10000 trees round-trip in {secs:.1f} s (< 30 s)")


def test_criterion_02_worked_examples(verdict):
    grandma = parse_hierarchical("[IN:OTHER [IN:CREATE_CALL call [IN:GET_CONTACT Grandma ] ] ]")
    fine = list(encode_flat(grandma).fine_intents)
    reminder = parse_hierarchical("[IN:CREATE_REMINDER remind [SL:PERSON_REMINDED me ] to [SL:TODO "
                                  "[IN:SEND_MESSAGE [SL:METHOD_MESSAGE message ] [SL:RECIPIENT Ann ] ] ] ]")
    stack = list(encode_flat(reminder).slot_stacks[reminder.tokens.index("message")])
    ok = fine == ["B-CREATE-CALL", "B-GET-CONTACT-NESTED"] and stack == ["B-TODO", "B-METHOD-MESSAGE"]
    verdict(2, ok, f"call-Grandma fine intents {fine}; 'message' stack {stack}")


def test_criterion_03_ort_equivariance(verdict):
    t0 = time.perf_counter()
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    attn = MultiHeadAttention(16, 4)
    enc = TransformerEncoder(OrtConfig(layers=1, heads=4, hidden_dim=16, conv_kernel=3, ff_dim=32))
    enc.eval()
    eq_dev = win_dev = 0.0
    with torch.no_grad():
        for _ in range(100):
            n = int(rng.integers(2, 16))
            x = torch.randn(1, n, 16)
            p = torch.from_numpy(rng.permutation(n))
            eq_dev = max(eq_dev, (attn(x[:, p]) - attn(x)[:, p]).abs().max().item())
        for _ in range(100):
            n = int(rng.integers(4, 16))
            x = torch.randn(n, 16)
            i = int(rng.integers(0, n))
            fixed = set(range(max(0, i - 1), min(n, i + 2)))
            free = [j for j in range(n) if j not in fixed]
            perm = list(range(n))
            for a, b in zip(free, rng.permutation(free)):
                perm[a] = int(b)
            perm = torch.tensor(perm)
            win_dev = max(win_dev, (ort_encode(x[perm], enc)[i] - ort_encode(x, enc)[i]).abs().max().item())
    secs = time.perf_counter() - t0
    ok = eq_dev <= 1e-5 and win_dev <= 1e-5 and secs < 60
    verdict(3, ok, f"attention equivariance {eq_dev:.2e}, 1-layer window invariance {win_dev:.2e} "
                   f"(<= 1e-5, 100 probes each), {secs:.1f} s")


def test_criterion_04_shuffle(verdict):
    rng = np.random.default_rng(0)
    outside = 0
    for k in (0, 1, 2, INF):
        for n in range(1, 7):
            allowed = {p for p in itertools.permutations(range(n)) if all(abs(p[j] - j) <= k for j in range(n))}
            for _ in range(100):
                outside += tuple(sample_permutation(n, k, rng)) not in allowed
    seen = Counter(tuple(shuffle_order(list("abc"), ShuffleSpec(k=INF), rng)[0]) for _ in range(1000))
    verdict(4, outside == 0 and len(seen) == 6,
            f"{outside} inadmissible draws over n<=6, k in {{0,1,2,inf}}; {len(seen)}/6 orders for n=3 in 1000 draws")


def test_criterion_05_procrustes(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    X = preprocess(rng.normal(size=(500, 50)))
    R = random_orthogonal(50, rng)
    Z = X @ R
    W = solve_mapping(X, Z, [(i, i) for i in range(500)])
    err = np.linalg.norm(W - R)
    orth = np.linalg.norm(W.T @ W - np.eye(50))
    # noisy seeds so refinement runs several rounds
    Zn = preprocess(Z + 0.3 * rng.normal(size=Z.shape) / np.sqrt(50))
    res = refine(X, Zn, [(i, i) for i in range(60)], threshold=0.0, max_iters=6)
    monotone = all(b >= a - 1e-9 for a, b in zip(res.history, res.history[1:]))
    secs = time.perf_counter() - t0
    ok = err < 1e-4 and orth < 1e-6 and monotone and secs < 10
    verdict(5, ok, f"||W-R||_F {err:.2e} (< 1e-4), ||W'W-I||_F {orth:.2e} (< 1e-6), objective over "
                   f"{len(res.history)} refine rounds {'non-decreasing' if monotone else 'DECREASES'}, {secs:.1f} s")


def test_criterion_06_crf_oracle(verdict):
    g = torch.Generator().manual_seed(0)
    rng = np.random.default_rng(0)
    worst_v = worst_z = 0.0
    for _ in range(200):
        n, L = int(rng.integers(1, 7)), int(rng.integers(1, 5))
        crf = CRF(L).double()
        with torch.no_grad():
            for p in crf.parameters():
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64))
        em = torch.randn(n, L, generator=g, dtype=torch.float64)
        scores = torch.tensor([crf.path_score(em, list(p)).item() for p in itertools.product(range(L), repeat=n)],
                              dtype=torch.float64)
        worst_v = max(worst_v, abs(crf.path_score(em, crf.viterbi(em)[0]).item() - scores.max().item()))
        worst_z = max(worst_z, abs(crf.log_partition(em).item() - torch.logsumexp(scores, 0).item()))
    verdict(6, worst_v <= 1e-6 and worst_z <= 1e-6,
            f"200 instances: Viterbi gap {worst_v:.1e}, log-partition gap {worst_z:.1e} (<= 1e-6)")


def test_criterion_07_span_masking(verdict):
    rng = np.random.default_rng(0)
    broken = 0
    for seed in range(10_000):
        n = int(rng.integers(1, 60))
        base = token_mask(n, seed=seed)
        out = span_mask(n, plan=base)
        broken += not (len(out.masked) == len(base.masked) == mask_count(n)
                       and Counter(out.actions) == Counter(base.actions))
    words = "Western music 's effect would continue to grow within the country 's sphere".split()
    moved = span_mask(words, plan=MaskPlan(len(words), (5, 11), ("mask", "mask"))).masked
    ok = broken == 0 and moved == (10, 11)
    verdict(7, ok, f"{broken} count violations over 10000 plans; example masks {[words[i] for i in moved]}")


def test_criterion_08_gradient_checks(verdict, float64):
    g = torch.Generator().manual_seed(0)
    worst = {}
    trees = ToyGrammar().dataset(10, seed=2)
    model, examples = build_model(trees, X2Config(d_model=16, encoder_layers=1, encoder_heads=2, encoder_ff=16,
                                                  slot_hidden=16, slot_heads=2, slot_ff=8))
    model.double()
    batch = make_batch(examples[:4], model)
    worst["x2_loss"] = fd_check(lambda: x2_loss(batch, model),
                                [model.embed.weight, model.fertility_head.weight, model.slot_in.weight,
                                 model.slot_head.bias, model.rank_embed.weight], probes=6)
    u, r = (torch.randn(3, 5, generator=g, requires_grad=True) for _ in range(2))
    w = torch.randn(2, 3, 5, generator=g, requires_grad=True)
    worst["template losses"] = fd_check(lambda: sum(template_losses(u, r, w, beta=0.7)), [u, r, w])
    xs = [torch.randn(4, 6, generator=g, requires_grad=True) for _ in range(4)]
    worst["label_reg_loss"] = fd_check(lambda: label_reg_loss(*xs), xs)
    adv = Adversary(3, 4).double()
    z = torch.randn(6, 3, generator=g, requires_grad=True)
    gold = torch.randint(0, 4, (6,), generator=g)
    worst["ALVM lvm"] = fd_check(lambda: alvm_losses(z, gold, adv)[1], [z])
    worst["ALVM fc"] = fd_check(lambda: alvm_losses(z, gold, adv)[0], [adv.linear.weight, adv.linear.bias])
    crf = CRF(4).double()
    em = torch.randn(2, 5, 4, generator=g, requires_grad=True)
    tags = torch.randint(0, 4, (2, 5), generator=g)
    mask = torch.tensor([[True] * 5, [True] * 3 + [False] * 2])
    worst["CRF nll"] = fd_check(lambda: crf.nll(em, tags, mask), [em, crf.transitions])
    verdict(8, max(worst.values()) < 1e-4,
            "worst relative error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (< 1e-4)")


def test_criterion_09_toy_overfit(verdict):
    t0 = time.perf_counter()
    trees = ToyGrammar(vocab_size=50, max_depth=3).dataset(200, seed=0)
    model, examples = build_model(trees, X2Config(d_model=64, encoder_layers=2), seed=0)
    train(model, examples, steps=300, seed=0)
    em = exact_match_rate(model, examples)
    secs = time.perf_counter() - t0
    verdict(9, em >= 0.95 and secs < 300, f"train exact match {100 * em:.1f}% after 300 steps (>= 95%), {secs:.1f} s")


def _coach_transfer(seed, cfg, epochs=6):
    world = ToySlotWorld(seed=seed)
    source = [CoachExample(t, l, world.domains[d]) for k, d in enumerate(("music", "travel"))
              for t, l in world.corpus(d, 300, seed + 100 * (k + 1))]
    target_types = list(world.domains["food"])
    test = world.corpus("food", 200, seed + 7)
    model = build_from_world(world, cfg, seed=seed)
    train_coach(model, source, epochs=epochs, seed=seed)
    pairs = model.type_gold_spans([t for t, _ in test], [l for _, l in test], target_types)
    zero_shot = float(np.mean([p == g for g, p in pairs if g == world.unseen]))
    shots = [CoachExample(t, l, world.domains["food"]) for t, l in world.corpus("food", 50, seed + 3)]
    train_coach(model, shots, epochs=epochs, seed=seed, start_epoch=epochs)
    f1 = bio_f1([l for _, l in test], model.predict([t for t, _ in test], target_types))[2]
    return zero_shot, f1, len(target_types)


def test_criterion_10_coach_transfer(verdict):
    t0 = time.perf_counter()
    cfg = CoachConfig(layers=1, hidden=64, dropout=0.3)
    runs = [_coach_transfer(seed, cfg) for seed in range(5)]
    secs = time.perf_counter() - t0
    acc = [r[0] for r in runs]
    f1 = [r[1] for r in runs]
    chance = 1 / runs[0][2]
    ok = np.mean(acc) > chance and min(f1) >= 90 and secs < 300
    verdict(10, ok, f"unseen-type zero-shot accuracy mean {np.mean(acc):.3f} over seeds 0-4 "
                    f"(per seed {', '.join(f'{a:.2f}' for a in acc)}; chance {chance:.2f}); "
                    f"50-shot span F1 min {min(f1):.1f} (>= 90); {secs:.1f} s")


def test_criterion_11_single_decoder_pass(verdict):
    model, _ = build_model(ToyGrammar().dataset(50, seed=0), seed=0)
    model.eval()
    calls = {}
    with torch.no_grad():
        for L in (5, 40):
            before = model.decoder_calls
            res = parse_utterance(["t0"] * L, model, [1] * L)
            assert sum(res.fertility) == L
            calls[L] = model.decoder_calls - before
    verdict(11, calls == {5: 1, 40: 1}, f"decoder invocations per utterance {calls}")


def test_criterion_12_cli_determinism(verdict, tmp_path, capsys):
    ws = make_workspace(tmp_path / "ws")
    codes = []
    for out in ("a", "b"):
        for name, argv, _ in subcommand_runs(ws, tmp_path / out):
            codes.append(main(argv))
    capsys.readouterr()
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    differ = [n for n in names if (tmp_path / "a" / n).read_bytes() != (tmp_path / "b" / n).read_bytes()]
    subcommands = sorted({argv[0] for _, argv, _ in subcommand_runs(ws, tmp_path / "c")})
    ok = not any(codes) and not differ
    verdict(12, ok, f"{len(names)} outputs from {', '.join(subcommands)} bitwise identical across two seeded runs"
            if ok else f"exit codes {codes}; differing outputs {differ}")
