import numpy as np
import pytest
import torch

from conftest import fd_check
from lowres_nlu.coach import (Coach, CoachConfig, CoachExample, coach_loss, coarse_labels, description_matrix,
                              make_templates, read_descriptions, template_losses, type_token)
from lowres_nlu.synthetic import ToySlotWorld
from lowres_nlu.tagger import Vocab


def test_templates_forced_wrong_type():
    tokens = ["play", "some", "jazz", "now"]
    labels = ["O", "O", "B-A", "O"]
    right, wrong, has = make_templates(tokens, labels, ["A", "B"], seed=0)
    assert has
    assert right == ["play", "some", "<A>", "now"]
    assert wrong == [["play", "some", "<B>", "now"]] * 2


def test_templates_multiword_span_collapses():
    right, wrong, _ = make_templates(["fly", "new", "york", "today"], ["O", "B-CITY", "I-CITY", "B-DATE"],
                                     ["CITY", "DATE", "MEAL"], seed=1)
    assert right == ["fly", "<CITY>", "<DATE>"]
    assert len(wrong) == 2
    for w in wrong:
        assert len(w) == 3 and w[1] != "<CITY>" and w[2] != "<DATE>"


def test_templates_without_entities():
    right, wrong, has = make_templates(["hi", "there"], ["O", "O"], ["A", "B"], seed=0)
    assert not has and right == ["hi", "there"] and wrong == [right, right]


def test_templates_seeded():
    args = (["a", "b", "c"], ["B-X", "O", "B-Y"], ["X", "Y", "Z", "W"])
    assert make_templates(*args, seed=5) == make_templates(*args, seed=5)
    draws = {tuple(map(tuple, make_templates(*args, seed=s)[1])) for s in range(20)}
    assert len(draws) > 1


def test_template_losses_analytic():
    u = torch.tensor([[1.0, 0.0]])
    w = torch.tensor([[0.0, 1.0]])
    l_r, l_w = template_losses(u, u.clone(), [w, w], beta=1.0)
    assert l_r.item() == 0.0
    assert l_w.item() == pytest.approx(-1.0)
    _, l_w2 = template_losses(u, u, [w, w], beta=2.0)
    assert l_w2.item() == pytest.approx(-2.0)
    r = torch.randn(3, 4)
    l_r, l_w = template_losses(torch.randn(3, 4), r, torch.randn(2, 3, 4))
    assert l_r.item() >= 0 and l_w.item() <= 0


def test_template_losses_gradient():
    g = torch.Generator().manual_seed(0)
    u = torch.randn(3, 5, generator=g, dtype=torch.float64, requires_grad=True)
    r = torch.randn(3, 5, generator=g, dtype=torch.float64, requires_grad=True)
    w = torch.randn(2, 3, 5, generator=g, dtype=torch.float64, requires_grad=True)
    fd_check(lambda: sum(template_losses(u, r, w, beta=0.7)), [u, r, w])


def test_description_rows_and_basis_typing():
    basis = {f"w{j}": torch.eye(4)[j] for j in range(4)}
    descs = {f"T{j}": [f"w{j}"] for j in range(4)}
    M = description_matrix([f"T{j}" for j in range(4)], descs, basis.__getitem__)
    assert torch.equal(M, torch.eye(4))
    for j in range(4):
        assert int((M @ torch.eye(4)[j]).argmax()) == j
    # rows sum their description words
    M2 = description_matrix(["S"], {"S": ["w0", "w1", "w1"]}, basis.__getitem__)
    assert torch.equal(M2[0], torch.tensor([1.0, 2.0, 0.0, 0.0]))


def test_argmax_stable_under_joint_scaling():
    g = torch.Generator().manual_seed(1)
    M = torch.randn(6, 8, generator=g)
    r = torch.randn(10, 8, generator=g)
    base = (r @ M.t()).argmax(-1)
    for c in (0.1, 3.0, 100.0):
        assert torch.equal(((c * r) @ (c * M).t()).argmax(-1), base)


def test_read_descriptions(tmp_path):
    path = tmp_path / "desc.tsv"
    path.write_text("CITY\tplace name\nDATE\tday time\n", encoding="utf-8")
    assert read_descriptions(path) == {"CITY": ["place", "name"], "DATE": ["day", "time"]}
    path.write_text("CITY place name\n", encoding="utf-8")
    with pytest.raises(ValueError):
        read_descriptions(path)


def test_coarse_labels():
    assert coarse_labels(["O", "B-X", "I-X", "B-Y"]) == ["O", "B", "I", "B"]


def _world_model(cfg=None, seed=0):
    world = ToySlotWorld(dim=16, seed=seed)
    words = sorted(world.table)
    vocab = Vocab(words)
    table = np.zeros((len(vocab), world.dim))
    for w in words:
        table[vocab.stoi[w]] = world.table[w]
    torch.manual_seed(seed)
    model = Coach(vocab, table, world.descriptions, cfg or CoachConfig(hidden=8, layers=1, dropout=0.0))
    data = [CoachExample(t, l, world.domains["music"]) for t, l in world.corpus("music", 8, seed)]
    return world, model, data


def test_structure():
    _, model, _ = _world_model()
    assert not model.embed.weight.requires_grad
    utt = {id(p) for p in model.encoder.parameters()}
    tmpl = {id(p) for p in model.template_encoder.parameters()}
    assert utt and tmpl and not (utt & tmpl)
    assert model.span_encoder.proj.out_features == model.embed.weight.shape[1]
    assert model.embed_tokens([type_token("CITY")]).shape == (1, 16)
    assert torch.allclose(model.embed_tokens([type_token("CITY")])[0], model.desc_matrix(["CITY"])[0])


def test_o_dominated_emissions_give_all_o():
    world, model, data = _world_model()
    with torch.no_grad():
        model.coarse_out.weight.zero_()
        model.coarse_out.bias.copy_(torch.tensor([50.0, 0.0, 0.0]))
    preds = model.predict([ex.tokens for ex in data], list(world.domains["music"]))
    assert all(set(p) == {"O"} for p in preds)


def _grads_after(model, loss):
    model.zero_grad()
    loss.backward()
    return {n: p.grad is not None and bool(p.grad.abs().sum() > 0) for n, p in model.named_parameters()}


def test_warmup_routes_template_loss_to_template_encoder_only():
    _, model, data = _world_model(CoachConfig(hidden=8, layers=1, dropout=0.0, warmup_epochs=2))
    _, terms = coach_loss(model, data, epoch=0, return_terms=True)
    touched = _grads_after(model, terms["r"] + terms["w"])
    assert any(touched[n] for n in touched if n.startswith("template_"))
    assert not any(touched[n] for n in touched if not n.startswith("template_"))
    # after warm-up the same terms reach the utterance encoder
    _, terms = coach_loss(model, data, epoch=2, return_terms=True)
    touched = _grads_after(model, terms["r"] + terms["w"])
    assert any(touched[n] for n in touched if n.startswith("encoder."))


def test_warmup_parameter_delta():
    _, model, data = _world_model(CoachConfig(hidden=8, layers=1, dropout=0.0, warmup_epochs=2))
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    opt = torch.optim.SGD([p for p in model.parameters() if p.requires_grad], lr=0.5)
    _, terms = coach_loss(model, data, epoch=1, return_terms=True)
    opt.zero_grad()
    (terms["r"] + terms["w"]).backward()
    opt.step()
    moved = {n for n, p in model.named_parameters() if not torch.equal(p, before[n])}
    assert moved and all(n.startswith("template_") for n in moved)


def test_coach_loss_terms():
    _, model, data = _world_model()
    total, terms = coach_loss(model, data, return_terms=True)
    assert set(terms) == {"crf", "type", "r", "w"}
    assert terms["crf"].item() >= 0 and terms["type"].item() >= 0 and terms["w"].item() <= 0
    assert total.item() == pytest.approx(sum(t.item() for t in terms.values()), rel=1e-6)


def test_coach_loss_gradient(float64):
    world, model, data = _world_model()
    model.double()
    params = [model.coarse_out.weight, model.crf.transitions, model.span_encoder.proj.weight,
              model.encoder.cells[0][0].gates.weight, model.template_pool.w]
    fd_check(lambda: coach_loss(model, data[:4], epoch=3), params, probes=5)


def test_span_encoder_variants_run():
    for kind in ("recurrent", "attention", "sum"):
        world, model, data = _world_model(CoachConfig(hidden=8, layers=1, dropout=0.0, span_encoder=kind))
        loss = coach_loss(model, data[:3])
        assert torch.isfinite(loss)
    with pytest.raises(ValueError):
        CoachConfig(span_encoder="cnn")
