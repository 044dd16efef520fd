use rand::Rng;

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding. Empty clusters keep their
/// previous centroid. Requires `points.len() >= k`.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    assert!(k >= 1 && points.len() >= k, "k-means needs at least k points");
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, d) in nearest.iter().enumerate() {
                if t < *d {
                    pick = i;
                    break;
                }
                t -= d;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
        let c = centroids.last().unwrap();
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min(dist2(p, c));
        }
    }
    let d = points[0].len();
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let (best, _) = centroids
                .iter()
                .enumerate()
                .map(|(i, c)| (i, dist2(p, c)))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            counts[best] += 1;
            sums[best].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for ((c, s), n) in centroids.iter_mut().zip(sums).zip(counts) {
            if n > 0 {
                *c = s.into_iter().map(|x| x / n as f64).collect();
            }
        }
    }
    centroids
}
