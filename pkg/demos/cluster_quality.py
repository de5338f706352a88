"""How well do k-means clusters of each feature type track the true phones?

Clusters MFCC (100 Hz, voted down to 25 Hz), HoG and the layers of a briefly
trained model on the same utterances and prints purity and NMI for each.
"""
import numpy as np

from avhubert import clusterlab as cl
from avhubert import model as M
from avhubert import synthcorpus as sc
from avhubert import trainer as tr

K = 20
data = tr.prepare(sc.generate_corpus(sc.CorpusConfig(splits={"pretrain": 300, "validation": 30}), seed=1))
pre = data.split("pretrain")
labels = data.labels(pre)

for feature in ("mfcc", "hog"):
    t, _ = tr.initial_targets(data, feature, K, 0, pre, pre)
    pur, nmi = cl.target_quality(t, labels)
    print(f"{feature:>8}: purity={pur:.3f} nmi={nmi:.3f}")

mfcc, _ = tr.initial_targets(data, "mfcc", K, 0, pre + data.split("validation"), pre)
res = tr.pretrain_iteration(data, mfcc, M.ModelConfig(codebook_size=K), tr.TrainConfig(steps=500),
                            tr.MaskConfig(), seed=0)
model = tr.best_model(res)
y = np.concatenate([labels[u] for u in pre])
for layer in range(1, model.cfg.layers + 1):
    feats = tr.layer_features(model, data, pre, layer)
    X = np.concatenate([feats[u] for u in pre])
    z = cl.assign(X, cl.kmeans_fit(X, K, n_restarts=1, seed=0))
    print(f" layer {layer}: purity={cl.purity(z, y):.3f} nmi={cl.nmi(z, y):.3f}")
