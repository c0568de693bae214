//! Rough conv2d forward+backward throughput at flow-sized shapes.
use std::time::Instant;

use flowstrike_tensor::{conv2d, Prng, Tensor};

fn main() {
    let mut p = Prng::new(0);
    for &(n, cin, cout, hw) in &[(32, 70, 16, 16), (32, 16, 16, 16), (32, 3, 16, 32), (32, 76, 16, 8)] {
        let x = Tensor::param(p.normal_vec(n * cin * hw * hw), &[n, cin, hw, hw]).unwrap();
        let k = Tensor::param(p.normal_vec(cout * cin * 9), &[cout, cin, 3, 3]).unwrap();
        let t = Instant::now();
        let reps = 5;
        for _ in 0..reps {
            let y = conv2d(&x, &k, None, 1, 1).unwrap();
            y.sum().unwrap().backward().unwrap();
        }
        let dt = t.elapsed().as_secs_f64() / reps as f64;
        let t2 = Instant::now();
        for _ in 0..reps {
            let _ = conv2d(&x.detach(), &k.detach(), None, 1, 1).unwrap();
        }
        println!("  forward only {:.1} ms", t2.elapsed().as_secs_f64() / reps as f64 * 1e3);
        let macs = (n * cin * cout * 9 * hw * hw) as f64 * 3.0;
        println!("n{n} cin{cin} cout{cout} {hw}x{hw}: {:.1} ms  {:.2} GMAC/s", dt * 1e3, macs / dt / 1e9);
    }
}
