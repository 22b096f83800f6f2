"""Where does the nearest neighbor live?  Distance vs learned cluster ranking.

Builds a small RVQ index over a PCA-compressed mixture, trains the qcs
first-level network on reference points, then reports how often the cluster
holding each held-out query's true NN is among the top R clusters.
Runs in about half a minute on one core.
"""
import numpy as np

from clusterrank.dataio import gen_synthetic, split, stratified_sample, VectorDataset
from clusterrank.evalbench import build_ground_truth
from clusterrank.index import build_index
from clusterrank.linalg import pairwise_sq, pca_fit, pca_transform
from clusterrank.ranker import first_features, first_targets_batch, mlp_train, nn_weights, predict_first

data = gen_synthetic(32, 1600, 128, 0.3, seed=1)
base, query = split(data, [data.count - 500, 500], seed=2)
pca = pca_fit(base.data, 6)
ref, qp = pca_transform(pca, base.data), pca_transform(pca, query.data)
print(f"{base.count} reference points in {base.dim}-d, indexed in {ref.shape[1]}-d")

index = build_index(ref, 128, 128, "rvq", seed=3)
labels = index.point_clusters()
gt = build_ground_truth(base.data, query.data, 1)

# training queries are reference points, each dropped from its own neighbor list
train = stratified_sample(VectorDataset(ref), index, 20000, seed=4)
tgt = build_ground_truth(base.data, base.data[train.ids], 50, exclude=train.ids)
y = first_targets_batch(tgt.ids, nn_weights(50), labels, index.cluster_sizes)
feats = first_features(train.data, "qcs", index.first)
model, losses = mlp_train(feats, y, hidden=(256, 256), epochs=30, batch=500, seed=5, mode="qcs")
print(f"f_qcs trained: loss {losses[0]:.3f} -> {losses[-1]:.3f}")

truth = labels[gt.ids[:, 0]]
by_dist = np.argsort(pairwise_sq(qp, index.first.centroids), axis=1, kind="stable")
by_prob = np.argsort(-predict_first(model, qp, "qcs", index.first), axis=1, kind="stable")

print("R    distance  probability")
for R in (1, 2, 3, 5, 10):
    hit_d = np.mean((by_dist[:, :R] == truth[:, None]).any(axis=1))
    hit_p = np.mean((by_prob[:, :R] == truth[:, None]).any(axis=1))
    print(f"{R:<4d} {hit_d:8.3f}  {hit_p:11.3f}")
