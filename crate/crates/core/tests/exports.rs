use tsr::export::{export_all, read_heatmap_text, read_pgm, HISTOGRAM_BINS, TIMESERIES_FILE};
use tsr::training::{train, TrainConfig};

const RUN: &str = r#"
epochs = 3
seed = 8
batch_size = 16
monitor_count = 6
heatmap_interval = 2

[network]
name = "vanillaNet"
size = "tiny"

[dataset]
kind = "synthetic"
samples = 60
classes = 3
image_size = 8
seed = 2
validation = 12
"#;

#[test]
fn exported_files_reproduce_the_history() {
    let out = train(&TrainConfig::from_toml(RUN).unwrap(), None).unwrap();
    let h = &out.history;
    let dir = tempfile::tempdir().unwrap();
    let paths = export_all(h, dir.path()).unwrap();
    assert!(paths.iter().all(|p| p.is_file()));

    let csv = std::fs::read_to_string(dir.path().join(TIMESERIES_FILE)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,entropy_conv1,entropy_conv2,entropy_conv3,entropy_conv4,entropy_fc1,train_loss,val_loss,val_accuracy"
    );
    for (line, record) in lines.zip(&h.epochs) {
        let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells[0], record.epoch as f64);
        assert_eq!(&cells[1..6], record.mean_entropy.as_slice());
        assert_eq!(
            cells[6..],
            [record.train_loss, record.val_loss, record.val_accuracy]
        );
    }

    let hist = std::fs::read_to_string(dir.path().join("correlation_conv3.csv")).unwrap();
    let rows: Vec<&str> = hist.lines().collect();
    assert_eq!(rows.len(), 1 + 4, "header plus epochs 0..=3");
    assert_eq!(rows[0].split(',').count(), 1 + HISTOGRAM_BINS);
    assert!(rows[0].starts_with("epoch,-1.00,-0.99"));
    let total: u64 = rows[1]
        .split(',')
        .skip(1)
        .map(|c| c.parse::<u64>().unwrap())
        .sum();
    assert_eq!(total, 16 * 15 / 2);

    // heatmaps at epochs 0, 2 and the final epoch
    let epochs: Vec<i64> = h
        .heatmaps
        .iter()
        .filter(|m| m.layer_id == "conv1")
        .map(|m| m.epoch)
        .collect();
    assert_eq!(epochs, [0, 2, 3]);
    for m in &h.heatmaps {
        let stem = dir
            .path()
            .join("heatmaps")
            .join(format!("layer_{}_epoch_{}", m.layer_id, m.epoch));
        let grid = read_heatmap_text(&stem.with_extension("txt")).unwrap();
        let flat: Vec<f64> = grid.concat();
        for (a, b) in flat.iter().zip(m.grid.concat().iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300), "{a} vs {b}");
        }
        let (w, hgt, px) = read_pgm(&stem.with_extension("pgm")).unwrap();
        assert_eq!((hgt, w), (m.grid.len(), m.grid[0].len()));
        assert_eq!(px.len(), w * hgt);
    }

    let json: tsr::training::History =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("history.json")).unwrap())
            .unwrap();
    assert_eq!(&json, h);
}
