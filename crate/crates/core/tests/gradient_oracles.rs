use patternformer::fragments::{check_fragment, default_tolerance, FRAGMENTS};
use patternformer::gradcheck::{check_gradients, project, projection, GradCheckOptions, GradCheckReport};
use patternformer::nn::{conv2d, max_pool2d};
use patternformer::{NdArray, Result, Tape, Var};

fn assert_report(name: &str, r: &GradCheckReport) {
    let probed = r.checked() + r.skipped();
    assert!(r.passed(), "{name}:\n{r}\nfailures: {:?}", &r.failures[..r.failures.len().min(8)]);
    assert!(r.checked() > 0, "{name}: nothing checked");
    assert!(r.skipped() * 20 <= probed, "{name}: {} of {probed} skipped", r.skipped());
}

fn opts(tol: f64) -> GradCheckOptions {
    GradCheckOptions {
        rel_tol: tol,
        ..Default::default()
    }
}

fn rand(shape: &[usize], seed: u64) -> NdArray<f64> {
    projection(shape, seed)
}

fn positive(shape: &[usize], seed: u64) -> NdArray<f64> {
    rand(shape, seed).map(|v| v.abs() + 0.5)
}

type Unary = fn(&Var<f64>) -> Result<Var<f64>>;
type Binary = fn(&Var<f64>, &Var<f64>) -> Result<Var<f64>>;

fn check_unary(name: &str, x: NdArray<f64>, f: Unary) {
    let r = check_gradients(
        |_: &Tape<f64>, v: &[Var<f64>]| project(&f(&v[0])?, 1),
        &[("x".into(), x)],
        &opts(1e-6),
    )
    .unwrap();
    assert_report(name, &r);
}

fn check_binary(name: &str, a: NdArray<f64>, b: NdArray<f64>, f: Binary) {
    let r = check_gradients(
        |_: &Tape<f64>, v: &[Var<f64>]| project(&f(&v[0], &v[1])?, 2),
        &[("a".into(), a), ("b".into(), b)],
        &opts(1e-6),
    )
    .unwrap();
    assert_report(name, &r);
}

#[test]
fn elementwise_primitives() {
    check_binary("add", rand(&[3, 4], 1), rand(&[4], 2), |a, b| a.add(b));
    check_binary("sub", rand(&[3, 1], 3), rand(&[3, 4], 4), |a, b| a.sub(b));
    check_binary("mul", rand(&[2, 3, 4], 5), rand(&[3, 1], 6), |a, b| a.mul(b));
    check_binary("div", rand(&[3, 4], 7), positive(&[3, 4], 8), |a, b| a.div(b));
    // Offset keeps every pair at least 0.5 apart, away from the kink.
    check_binary("maximum", rand(&[3, 4], 9), rand(&[3, 4], 9).map(|v| v + 0.5), |a, b| a.maximum(b));
    check_unary("neg", rand(&[5], 10), |x| x.neg());
    check_unary("scale", rand(&[5], 11), |x| x.scale(-2.5));
    check_unary("add_scalar", rand(&[5], 12), |x| x.add_scalar(3.0));
    check_unary("exp", rand(&[3, 4], 13), |x| x.exp());
    check_unary("log", positive(&[3, 4], 14), |x| x.log());
    check_unary("sqrt", positive(&[3, 4], 15), |x| x.sqrt());
    check_unary("erf", rand(&[3, 4], 16), |x| x.erf());
    check_unary("relu", rand(&[3, 4], 17).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v }), |x| x.relu());
    check_unary("gelu", rand(&[3, 4], 18), |x| x.gelu());
}

#[test]
fn shape_primitives() {
    check_unary("reshape", rand(&[2, 6], 20), |x| x.reshape(&[3, 4]));
    check_unary("permute", rand(&[2, 3, 4], 21), |x| x.permute(&[2, 0, 1]));
    check_unary("transpose", rand(&[2, 3, 4], 22), |x| x.transpose(1, 2));
    check_unary("sum_axes", rand(&[2, 3, 4], 23), |x| x.sum_axes(&[0, 2], false));
    check_unary("mean_axes", rand(&[2, 3, 4], 24), |x| x.mean_axes(&[1], true));
    check_unary("broadcast_to", rand(&[3, 1], 25), |x| x.broadcast_to(&[2, 3, 4]));
    check_unary("narrow", rand(&[4, 5], 26), |x| x.narrow(1, 1, 3));
    check_binary("concat", rand(&[2, 3], 27), rand(&[2, 2], 28), |a, b| a.tape().concat(&[a, b], 1));
}

#[test]
fn reduction_and_product_primitives() {
    check_binary("matmul", rand(&[4, 5], 30), rand(&[5, 6], 31), |a, b| a.matmul(b));
    check_binary("batched_matmul", rand(&[2, 3, 4], 32), rand(&[2, 4, 5], 33), |a, b| a.matmul(b));
    check_binary("linear", rand(&[2, 3, 5], 34), rand(&[4, 5], 35), |a, b| a.linear(b, None));
    check_unary("softmax", rand(&[3, 5], 36), |x| x.softmax(1));
    check_unary("log_softmax", rand(&[3, 5], 37), |x| x.log_softmax(0));
    check_unary("sum_all", rand(&[3, 5], 38), |x| x.sum_all());
    check_unary("mean_all", rand(&[3, 5], 39), |x| x.mean_all());
    check_binary("conv2d", rand(&[2, 3, 6, 6], 40), rand(&[4, 3, 3, 3], 41), |a, b| conv2d(a, b, None, 2, 1));
    check_unary("max_pool2d", rand(&[1, 2, 7, 7], 42), |x| max_pool2d(x, 3, 2, 1));
}

fn mlp(tape: &Tape<f64>, v: &[Var<f64>]) -> Result<Var<f64>> {
    let _ = tape;
    let h = v[0].linear(&v[1], Some(&v[2]))?.gelu()?;
    let h = h.linear(&v[3], Some(&v[4]))?.gelu()?;
    let out = h.linear(&v[5], Some(&v[6]))?;
    project(&out, 3)
}

fn mlp_inputs() -> Vec<(String, NdArray<f64>)> {
    let shapes: [(&str, &[usize]); 7] = [
        ("x", &[4, 5]),
        ("w1", &[8, 5]),
        ("b1", &[8]),
        ("w2", &[8, 8]),
        ("b2", &[8]),
        ("w3", &[3, 8]),
        ("b3", &[3]),
    ];
    shapes
        .iter()
        .enumerate()
        .map(|(i, (n, s))| (n.to_string(), rand(s, 100 + i as u64)))
        .collect()
}

#[test]
fn three_layer_mlp_f64() {
    let r = check_gradients(mlp, &mlp_inputs(), &opts(1e-6)).unwrap();
    assert_report("mlp", &r);
    assert!(r.max_rel_err() < 1e-6);
}

#[test]
fn three_layer_mlp_f32() {
    let inputs: Vec<(String, NdArray<f32>)> = mlp_inputs().into_iter().map(|(n, x)| (n, x.cast())).collect();
    let f = |_: &Tape<f32>, v: &[Var<f32>]| -> Result<Var<f32>> {
        let h = v[0].linear(&v[1], Some(&v[2]))?.gelu()?;
        let h = h.linear(&v[3], Some(&v[4]))?.gelu()?;
        project(&h.linear(&v[5], Some(&v[6]))?, 3)
    };
    let o = GradCheckOptions {
        eps: 1e-2,
        rel_tol: 1e-3,
        ..Default::default()
    };
    let r = check_gradients(f, &inputs, &o).unwrap();
    assert_report("mlp-f32", &r);
}

#[test]
fn every_fragment_passes() {
    for name in FRAGMENTS {
        let r = check_fragment(name, &opts(default_tolerance(name))).unwrap();
        assert_report(name, &r);
    }
}

#[test]
fn bottle_block_and_encoder_bounds() {
    let o = opts(1e-6);
    assert!(check_fragment("bottle-block", &o).unwrap().max_rel_err() < 1e-6);
    assert!(check_fragment("encoder-block", &o).unwrap().max_rel_err() < 1e-6);
    assert!(check_fragment("encoder-stack", &o).unwrap().max_rel_err() < 1e-6);
}

#[test]
fn breach_lists_offending_coordinates() {
    let wrong = |_: &Tape<f64>, v: &[Var<f64>]| -> Result<Var<f64>> {
        // The value of x*x with the gradient of x: detach one factor.
        v[0].mul(&v[0].detach())?.sum_all()
    };
    let r = check_gradients(wrong, &[("x".into(), rand(&[6], 50))], &opts(1e-6)).unwrap();
    assert!(!r.passed());
    assert_eq!(r.failures.len(), 6);
    let err = r.into_result().unwrap_err().to_string();
    assert!(err.contains("x["), "{err}");
}
