from multiuap._tuning import tune_allocator
tune_allocator()
import sys, time
import numpy as np
from multiuap import autodiff as ad
from multiuap.model import ModelConfig, init_model, forward_batch
from multiuap.optim import AdamW, lr_schedule
from multiuap.pretrain import answer_cross_entropy, layout_batches, predict_batch
from multiuap.synthtask import DatasetSpec, gen_dataset

def perkind(model, dataset, cfg):
    samples=[i.to_sample(cfg) for i in dataset]
    hits={};tots={}
    for idxs in layout_batches(samples,128):
        insts=[dataset.instances[i] for i in idxs]
        preds=predict_batch(model,[samples[i] for i in idxs],[x.options for x in insts])
        for p,x in zip(preds,insts):
            tots[x.kind]=tots.get(x.kind,0)+1; hits[x.kind]=hits.get(x.kind,0)+(p==x.answer)
    return sum(hits.values())/sum(tots.values()), {k:round(hits[k]/tots[k],3) for k in sorted(tots)}

wd = float(sys.argv[1]); epochs=int(sys.argv[2]); lr=float(sys.argv[3])
kind_mix = {"count":1.0, "compare":0.8, "position":1.2}
cfg = ModelConfig(); model = init_model(cfg)
train, heldout = gen_dataset(DatasetSpec(n_train=2048, n_heldout=384, kind_mix=kind_mix))
samples=[i.to_sample(cfg) for i in train]
rng=np.random.default_rng(0)
opt=AdamW(model.parameters(), lr=lr, weight_decay=wd)
spe=len(layout_batches(samples,32)); total=epochs*spe; step=0
t0=time.time()
for ep in range(epochs):
    for idxs in layout_batches(samples,32,rng):
        bs=[samples[i] for i in idxs]
        loss=answer_cross_entropy(forward_batch(model,bs),bs)
        opt.zero_grad(); ad.backward(loss)
        opt.step(lr_schedule(step,total,lr,0.05)); step+=1
    if (ep+1)%4==0 or ep==epochs-1:
        acc,pk=perkind(model,heldout,cfg)
        print(f"ep {ep+1:2d} loss {loss.item():.3f} acc {acc:.3f} {pk} ({time.time()-t0:.0f}s)",flush=True)
