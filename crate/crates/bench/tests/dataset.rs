use anchorseg_bench::data::{generate_dataset, vocab, Dataset};
use anchorseg_core::config::{DataConfig, Dims};

fn config(n: usize, null_fraction: f64) -> DataConfig {
    DataConfig {
        n_samples: n,
        null_fraction,
        ..DataConfig::default()
    }
}

#[test]
fn null_fraction_is_within_binomial_bounds() {
    let dims = Dims::toy();
    let (n, p) = (400, 0.25);
    let ds = generate_dataset(&dims, &config(n, p), 11).unwrap();
    let nulls = ds.samples.iter().filter(|s| s.is_null).count() as f64;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((nulls - n as f64 * p).abs() < 4.0 * sd, "{nulls} null samples of {n}");
}

#[test]
fn null_samples_have_empty_masks_and_others_do_not() {
    let ds = generate_dataset(&Dims::toy(), &config(120, 0.3), 3).unwrap();
    for (i, s) in ds.samples.iter().enumerate() {
        let area = s.mask.iter().filter(|&&m| m == 1).count();
        assert_eq!(s.is_null, area == 0, "sample {i}");
        assert!(s.mask.iter().all(|&m| m <= 1));
        assert!(!s.symbols.is_empty() && s.symbols.len() <= ds.max_symbols);
        assert!(s.symbols.iter().all(|&t| (t as usize) < vocab::SIZE));
        assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn seeds_are_reproducible_and_distinct() {
    let dims = Dims::toy();
    let a = generate_dataset(&dims, &config(24, 0.2), 5).unwrap().to_bytes().unwrap();
    let b = generate_dataset(&dims, &config(24, 0.2), 5).unwrap().to_bytes().unwrap();
    let c = generate_dataset(&dims, &config(24, 0.2), 6).unwrap().to_bytes().unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn corrupted_files_are_rejected() {
    let bytes = generate_dataset(&Dims::toy(), &config(4, 0.0), 1).unwrap().to_bytes().unwrap();
    assert!(Dataset::read_from(&bytes[..], "ok").is_ok());

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(Dataset::read_from(&bad_magic[..], "magic").is_err());

    assert!(Dataset::read_from(&bytes[..bytes.len() - 1], "truncated").is_err());

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(Dataset::read_from(&trailing[..], "trailing").is_err());
}
