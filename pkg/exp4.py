# verify pretrain_model defaults reach the gate on the updated task
from multiuap._tuning import tune_allocator
tune_allocator()
import time
from multiuap.model import ModelConfig, init_model
from multiuap.pretrain import pretrain_model
from multiuap.synthtask import DatasetSpec, gen_dataset

t0 = time.time()
cfg = ModelConfig()
model = init_model(cfg)
train, heldout = gen_dataset(DatasetSpec())
report = pretrain_model(model, train, heldout, epochs=30)
print(f"heldout accuracy: {report.heldout_accuracy:.4f} in {time.time()-t0:.0f}s")
print("frozen:", model.frozen)
