// scratch diagnostic: print the trained step-fit on a grid
use bilip_core::model_io::load_model;

fn main() {
    let path = std::env::args().nth(1).expect("model path");
    let m = load_model(std::path::Path::new(&path)).unwrap();
    let core = m.params.materialize_core().unwrap();
    let mut grid = vec![];
    let mut x = -2.0;
    while x <= 2.0 {
        grid.push(x);
        x += 0.05;
    }
    for &x in &grid {
        let y = core.forward_vec(&[x]).unwrap()[0];
        println!("{x:.3} {y:.4}");
    }
}
