"""Small end-to-end run: corpus, two pre-training iterations, lip-reading fine-tune.

Takes a minute or two on one core. The budgets are toy-sized, so both WERs
stay close to 1; the acceptance tests use 3000 pre-training and 1000
fine-tuning steps on the full corpus. Pass an output directory (default
./quickstart_run).
"""
import sys
from pathlib import Path

from avhubert import model as M
from avhubert import synthcorpus as sc
from avhubert import trainer as tr

out = Path(sys.argv[1] if len(sys.argv) > 1 else "quickstart_run")
cfg = sc.CorpusConfig(splits={"pretrain": 300, "labeled": 60, "validation": 30, "test": 40})
data = tr.prepare(sc.generate_corpus(cfg, seed=0))

plan = tr.IterationPlan(variant="AV/MFCC->AV", n_iterations=2, K=[20, 20], steps=[400, 400],
                        model=M.ModelConfig(codebook_size=20))
run = tr.iterative_pretrain(data, plan, seed=0, out_dir=out / "pretrain")
for m in run.metrics():
    print(f"iteration {m['iteration']}: nmi={m['nmi']:.3f} purity={m['purity']:.3f} val_loss={m['val_loss']:.3f}")

ft = tr.FinetuneConfig(steps=300)
for name, ck in [("scratch", None), ("pretrained", run.best_checkpoint())]:
    res = tr.finetune(ck, data, "visual-only", ft, seed=0, model_cfg=plan.model)
    wer, rows = tr.evaluate_wer(tr.best_model(res), data, data.split("test"), "visual-only")
    print(f"{name:>10} lip-reading WER {wer:.3f}")
uid, ref, hyp = rows[0]
print("example", uid, "ref", ref, "hyp", hyp)
