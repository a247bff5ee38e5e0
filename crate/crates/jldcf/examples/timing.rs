fn main() {
    let t0 = std::time::Instant::now();
    let ops = jldcf::gradcheck::check_all_ops(1234);
    println!("ops: {:?} max err {:.2e}", t0.elapsed(), ops.iter().map(|r| r.max_rel_err).fold(0.0f64, f64::max));
    let t1 = std::time::Instant::now();
    let net = jldcf::gradcheck::check_toy_network(42);
    println!("net: {:?} err {:.3e} pass={}", t1.elapsed(), net.max_rel_err, net.passed());
}
