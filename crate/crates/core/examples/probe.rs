use xfund::market::*;
fn main() {
    for &(s, n) in &[
        (0.49133464117910114, 49usize),
        (0.5, 59),
        (0.2, 59),
        (0.3, 200),
        (0.2, 200),
    ] {
        let g = TimeGrid::new(0.0, 1.0, n).unwrap();
        let mut acc = AccountSet::new();
        acc.insert(Account::constant("B1", 0.05627687525517825, &g).unwrap())
            .unwrap();
        let lat = calibrate_lattice_against(
            &[AssetModel::new(
                1,
                100.0,
                0.0,
                s,
                0.0051571731831519885,
                "B1",
            )],
            &[acc.get("B1").unwrap()],
            &g,
        )
        .unwrap();
        let top = lat.price(0, n, lat.n_nodes(n) - 1);
        println!(
            "sigma {s} n {n}: residual {:e}, top price {top}",
            cum_dividend_residual(&lat, 0, acc.get("B1").unwrap())
        );
    }
}
