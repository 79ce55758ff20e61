# scratch experiment: pretraining hyperparameters and task difficulty (not part of the package)
import sys
import time
import numpy as np

from multiuap._tuning import tune_allocator

tune_allocator()

from multiuap import autodiff as ad
from multiuap.model import ModelConfig, init_model, forward_batch
from multiuap.optim import AdamW, lr_schedule
from multiuap.pretrain import answer_cross_entropy, layout_batches, predict_batch
from multiuap.synthtask import DatasetSpec, gen_dataset


def perkind_accuracy(model, dataset, cfg):
    samples = [inst.to_sample(cfg) for inst in dataset]
    hits = {}
    tots = {}
    for idxs in layout_batches(samples, 128):
        insts = [dataset.instances[i] for i in idxs]
        preds = predict_batch(model, [samples[i] for i in idxs], [x.options for x in insts])
        for p, inst in zip(preds, insts):
            tots[inst.kind] = tots.get(inst.kind, 0) + 1
            hits[inst.kind] = hits.get(inst.kind, 0) + (p == inst.answer)
    overall = sum(hits.values()) / sum(tots.values())
    return overall, {k: hits[k] / tots[k] for k in sorted(tots)}


def run(n_train, epochs, lr, batch, seed=0, final=0.1):
    cfg = ModelConfig()
    model = init_model(cfg)
    train, heldout = gen_dataset(DatasetSpec(n_train=n_train, n_heldout=384))
    samples = [inst.to_sample(cfg) for inst in train]
    rng = np.random.default_rng(seed)
    opt = AdamW(model.parameters(), lr=lr)
    spe = len(layout_batches(samples, batch))
    total = epochs * spe
    step = 0
    t0 = time.time()
    for ep in range(epochs):
        for idxs in layout_batches(samples, batch, rng):
            bs = [samples[i] for i in idxs]
            loss = answer_cross_entropy(forward_batch(model, bs), bs)
            opt.zero_grad()
            ad.backward(loss)
            opt.step(lr_schedule(step, total, lr, final))
            step += 1
        if (ep + 1) % 4 == 0 or ep == epochs - 1:
            acc, perkind = perkind_accuracy(model, heldout, cfg)
            print(
                f"  ep {ep+1:2d} loss {loss.item():.3f} acc {acc:.3f} {perkind} "
                f"({time.time()-t0:.0f}s)",
                flush=True,
            )
    return acc


if __name__ == "__main__":
    variant = sys.argv[1] if len(sys.argv) > 1 else "a"
    if variant == "a":
        print("lr 6e-3 batch 32, n=1024, 14 epochs")
        run(1024, 14, 6e-3, 32)
    elif variant == "b":
        print("lr 1e-2 batch 32, n=1024, 14 epochs")
        run(1024, 14, 1e-2, 32)
    elif variant == "c":
        print("lr 6e-3 batch 64, n=2048, 14 epochs")
        run(2048, 14, 6e-3, 64)
