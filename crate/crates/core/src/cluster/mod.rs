//! Pre-training stage: week-vector autoencoder, k-means initialisation,
//! deep embedded clustering and hard group assignment.

mod assign;
mod dec;
mod kmeans;

pub use assign::{
    adjusted_rand_index, argmax, cluster_kl, hard_assign, soft_assign, student_t_assignments, target_distribution, HardGroups,
};
pub use dec::{dec_train, encode_latents, pretrain_autoencoder, ClusterState, DecTrace, PretrainAutoencoder, CENTROIDS_PARAM};
pub use kmeans::{kmeans, kmeans_init, KMeansFit, KMEANS_MAX_ITERS, KMEANS_RESTARTS, KMEANS_TOL};
