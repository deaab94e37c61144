use ivr_core::layers::MSE_LAMBDAS;
use ivr_web::ops::{bd_compare, entropy_table, interp_rate};

#[test]
fn interpolated_rate_and_onehot() {
    let r = interp_rate(&MSE_LAMBDAS, 0, 1, 2).unwrap();
    assert_eq!(r[0], 105.0);
    assert_eq!(&r[1..4], &[0.5, 0.5, 0.0]);
    assert_eq!(r.len(), 1 + MSE_LAMBDAS.len());
    assert!(interp_rate(&MSE_LAMBDAS, 9, 1, 1).is_err());
    assert!(interp_rate(&MSE_LAMBDAS, 0, 3, 2).is_err());
}

#[test]
fn table_tracks_the_laplace_masses() {
    let rows = entropy_table(0.3, 0.5, -6, 6).unwrap();
    assert_eq!(rows.len(), 13 * 4);
    for row in rows.chunks(4) {
        let (mass, p) = (row[1], row[2]);
        assert!(p > 0.0);
        assert!((mass - p).abs() < 1e-3, "{row:?}");
        assert!((row[3] + p.log2()).abs() < 1e-12);
    }
    assert!(entropy_table(0.0, 0.0, 3, 2).is_err());
}

#[test]
fn identical_curves_have_zero_deltas() {
    let csv = "label,bpp,quality,quality_kind\na,0.1,28,psnr_db\na,0.2,30,psnr_db\na,0.4,33,psnr_db\na,0.8,36,psnr_db\n";
    let d = bd_compare(csv, csv).unwrap();
    assert!(d[0].abs() < 1e-9 && d[1].abs() < 1e-9);
    assert!(bd_compare("label,bpp,quality,quality_kind\n", csv).is_err());
}
