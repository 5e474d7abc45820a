fn main() {
    for r in geoformer::gradcheck::full_suite().unwrap() {
        println!("{}: max_rel_err = {:.3e} (tol {:.0e}) -> {}", r.group, r.max_rel_err, r.tol, if r.passed() {"PASS"} else {"FAIL"});
    }
}
