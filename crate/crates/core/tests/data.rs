use ibpcl_core::data::{
    load_idx_pair, make_permuted_stream, make_split_stream, make_synthetic, read_idx, write_idx, Dataset, IdxArray,
    Synthetic,
};
use ibpcl_core::Tensor;
use proptest::prelude::*;

fn idx_array() -> impl Strategy<Value = IdxArray> {
    prop::collection::vec(1usize..5, 1..4).prop_flat_map(|dims| {
        let n: usize = dims.iter().product();
        prop::collection::vec(any::<u8>(), n).prop_map(move |data| IdxArray { dims: dims.clone(), data })
    })
}

proptest! {
    #[test]
    fn idx_files_round_trip_bitwise(array in idx_array()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.idx");
        write_idx(&path, &array).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let back = read_idx(&path).unwrap();
        prop_assert_eq!(&back, &array);
        write_idx(&path, &back).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn truncated_idx_is_rejected(array in idx_array(), cut in 1usize..4) {
        let bytes = array.to_bytes();
        let cut = cut.min(bytes.len());
        prop_assert!(IdxArray::parse(&bytes[..bytes.len() - cut]).is_err());
    }
}

fn labelled(classes: usize, per_class: usize, dim: usize) -> Dataset {
    let n = classes * per_class;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let x = Tensor::from_fn(n, dim, |r, c| ((r * 7 + c * 3) % 11) as f64 / 10.0);
    Dataset::new(x, labels, classes).unwrap()
}

#[test]
fn idx_pair_loads_scaled_images() {
    let dir = tempfile::tempdir().unwrap();
    let images = IdxArray {
        dims: vec![2, 1, 3],
        data: vec![0, 128, 255, 3, 2, 1],
    };
    let labels = IdxArray {
        dims: vec![2],
        data: vec![4, 1],
    };
    write_idx(dir.path().join("i"), &images).unwrap();
    write_idx(dir.path().join("l"), &labels).unwrap();
    let d = load_idx_pair(dir.path().join("i"), dir.path().join("l")).unwrap();
    assert_eq!(d.labels, vec![4, 1]);
    assert_eq!(d.inputs.get(0, 1), 128.0 / 255.0);
    assert_eq!(d.dim(), 3);
}

#[test]
fn split_tasks_partition_the_named_classes() {
    let (train, test) = (labelled(10, 13, 4), labelled(10, 5, 4));
    let groups = vec![vec![0, 1], vec![2, 3], vec![7, 5]];
    let s = make_split_stream(&train, &test, &groups).unwrap();
    assert_eq!(s.len(), 3);
    let total: usize = s.tasks.iter().map(|t| t.train.len()).sum();
    let named = train.labels.iter().filter(|l| groups.iter().flatten().any(|c| c == *l)).count();
    assert_eq!(total, named);
    for (task, group) in s.tasks.iter().zip(&groups) {
        assert_eq!(&task.class_map, group);
        for (i, &local) in task.train.labels.iter().enumerate() {
            let original = task.class_map[local];
            let row: Vec<f64> = (0..4).map(|c| task.train.inputs.get(i, c)).collect();
            let found = (0..train.len())
                .any(|j| train.labels[j] == original && (0..4).all(|c| train.inputs.get(j, c) == row[c]));
            assert!(found);
        }
    }
    assert!(make_split_stream(&train, &test, &[vec![0, 1], vec![1, 2]]).is_err());
}

#[test]
fn permuted_tasks_preserve_pixel_histograms() {
    let (train, test) = (labelled(3, 4, 9), labelled(3, 2, 9));
    let s = make_permuted_stream(&train, &test, 4, 11).unwrap();
    assert_eq!(s.tasks[0].train, train);
    let histogram = |d: &Dataset, r: usize| {
        let mut v: Vec<u64> = (0..d.dim()).map(|c| d.inputs.get(r, c).to_bits()).collect();
        v.sort_unstable();
        v
    };
    for task in &s.tasks[1..] {
        assert_eq!(task.train.labels, train.labels);
        for r in 0..train.len() {
            assert_eq!(histogram(&task.train, r), histogram(&train, r));
        }
    }
    let again = make_permuted_stream(&train, &test, 4, 11).unwrap();
    assert_eq!(again, s);
}

#[test]
fn well_separated_blobs_are_linearly_separable() {
    let kind = Synthetic::GaussBlobs {
        classes: 2,
        dim: 5,
        per_class: 500,
        separation: 10.0,
    };
    let d = make_synthetic(&kind, 3).unwrap();
    assert_eq!(d, make_synthetic(&kind, 3).unwrap());
    // nearest class mean is a linear rule for two classes
    let mean = |class: usize| -> Vec<f64> {
        let rows: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == class).collect();
        (0..d.dim()).map(|c| rows.iter().map(|&r| d.inputs.get(r, c)).sum::<f64>() / rows.len() as f64).collect()
    };
    let (m0, m1) = (mean(0), mean(1));
    let correct = (0..d.len())
        .filter(|&i| {
            let dist = |m: &[f64]| (0..d.dim()).map(|c| (d.inputs.get(i, c) - m[c]).powi(2)).sum::<f64>();
            usize::from(dist(&m1) < dist(&m0)) == d.labels[i]
        })
        .count();
    assert!(correct as f64 / d.len() as f64 >= 0.99);
}

#[test]
fn cluster_images_stay_in_unit_range() {
    let d = make_synthetic(
        &Synthetic::ClusterImages {
            classes: 4,
            per_class: 50,
            noise: 0.5,
        },
        5,
    )
    .unwrap();
    assert!(d.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
}
