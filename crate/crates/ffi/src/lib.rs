//! C ABI over the world model, shape categories and the value network.
//!
//! Every object crosses the boundary as an opaque handle that the caller
//! releases with the matching `*_free`. Functions return a [`UbStatus`];
//! on failure a message for the calling thread is kept and can be read with
//! [`ub_last_error`]. Strings returned to the caller are released with
//! [`ub_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unbuild::value::{greedy_policy_step, StateValue, ValueNet, ENCODING_DIM};
use unbuild::{AssemblyAction, Category, Orientation, Variant, WorldState};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidState = 3,
    InvalidAction = 4,
    Io = 5,
    Checkpoint = 6,
    NoAction = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// A world state.
pub struct UbState(WorldState);

/// A shape category with its classifier.
pub struct UbCategory(Category);

/// A trained value network.
pub struct UbNet(ValueNet);

/// One pick-and-place action. `orientation` is 0 (along x), 1 (along y) or
/// 2 (along z).
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UbAction {
    pub pick_id: u32,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub orientation: u32,
}

impl From<&AssemblyAction> for UbAction {
    fn from(a: &AssemblyAction) -> Self {
        UbAction {
            pick_id: a.pick_id,
            x: a.place_position[0],
            y: a.place_position[1],
            z: a.place_position[2],
            orientation: a.orientation.index() as u32,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).unwrap_or_default());
}

fn guard(f: impl FnOnce() -> Result<(), (UbStatus, String)>) -> UbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            UbStatus::Ok
        }
        Ok(Err((code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            UbStatus::Panic
        }
    }
}

fn null() -> (UbStatus, String) {
    (UbStatus::NullPointer, "null pointer argument".into())
}

unsafe fn deref<'a, T>(p: *const T) -> Result<&'a T, (UbStatus, String)> {
    p.as_ref().ok_or_else(null)
}

unsafe fn out<'a, T>(p: *mut T) -> Result<&'a mut T, (UbStatus, String)> {
    p.as_mut().ok_or_else(null)
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, (UbStatus, String)> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p).to_str().map_err(|_| (UbStatus::InvalidArgument, "string is not UTF-8".into()))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ub_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ub_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Arch category of height `height` (3 to 5).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ub_category_arch(height: u8, out_cat: *mut *mut UbCategory) -> UbStatus {
    guard(|| {
        let o = out(out_cat)?;
        let c = Category::arch(height).map_err(|e| (UbStatus::InvalidArgument, e.to_string()))?;
        *o = boxed(UbCategory(c));
        Ok(())
    })
}

/// Tower category of `n_cubes` cubes.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ub_category_tower(n_cubes: usize, out_cat: *mut *mut UbCategory) -> UbStatus {
    guard(|| {
        let o = out(out_cat)?;
        let c = Category::tower(n_cubes).map_err(|e| (UbStatus::InvalidArgument, e.to_string()))?;
        *o = boxed(UbCategory(c));
        Ok(())
    })
}

/// # Safety
/// `cat` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ub_category_free(cat: *mut UbCategory) {
    if !cat.is_null() {
        drop(Box::from_raw(cat));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ub_category_instance_count(cat: *const UbCategory, count: *mut usize) -> UbStatus {
    guard(|| {
        let c = deref(cat)?;
        *out(count)? = c.0.instances().len();
        Ok(())
    })
}

/// Primitives of a uniformly chosen instance scattered loose on the table.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ub_state_scatter(cat: *const UbCategory, seed: u64, out_state: *mut *mut UbState) -> UbStatus {
    guard(|| {
        let c = deref(cat)?;
        let o = out(out_state)?;
        let s = unbuild::search::sample_episode(&c.0, seed);
        *o = boxed(UbState(s));
        Ok(())
    })
}

/// Parse a state from its JSON form.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out_state` valid.
#[no_mangle]
pub unsafe extern "C" fn ub_state_from_json(json: *const c_char, out_state: *mut *mut UbState) -> UbStatus {
    guard(|| {
        let text = str_arg(json)?;
        let o = out(out_state)?;
        let s = WorldState::from_json(text).map_err(|e| (UbStatus::InvalidState, e.to_string()))?;
        *o = boxed(UbState(s));
        Ok(())
    })
}

/// Serialize a state; free the result with [`ub_string_free`].
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ub_state_to_json(state: *const UbState, out_json: *mut *mut c_char) -> UbStatus {
    guard(|| {
        let s = deref(state)?;
        let o = out(out_json)?;
        *o = CString::new(s.0.to_json()).map_err(|e| (UbStatus::InvalidState, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `state` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ub_state_free(state: *mut UbState) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ub_state_primitive_count(state: *const UbState, count: *mut usize) -> UbStatus {
    guard(|| {
        *out(count)? = deref(state)?.0.len();
        Ok(())
    })
}

/// Enumerate valid actions. With `buf` null (or too small) only `count` is
/// written and [`UbStatus::BufferTooSmall`] is returned when actions exist.
///
/// # Safety
/// `buf` must hold `cap` actions when non-null.
#[no_mangle]
pub unsafe extern "C" fn ub_state_actions(
    state: *const UbState,
    buf: *mut UbAction,
    cap: usize,
    count: *mut usize,
) -> UbStatus {
    guard(|| {
        let s = deref(state)?;
        let n = out(count)?;
        let actions = s.0.enumerate_actions();
        *n = actions.len();
        if buf.is_null() || cap < actions.len() {
            if actions.is_empty() {
                return Ok(());
            }
            return Err((UbStatus::BufferTooSmall, format!("{} actions need a larger buffer", actions.len())));
        }
        let dst = std::slice::from_raw_parts_mut(buf, cap);
        for (d, a) in dst.iter_mut().zip(&actions) {
            *d = a.into();
        }
        Ok(())
    })
}

/// Apply an action, producing a new state; the input state is unchanged.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ub_state_apply(
    state: *const UbState,
    action: *const UbAction,
    out_state: *mut *mut UbState,
) -> UbStatus {
    guard(|| {
        let s = deref(state)?;
        let a = deref(action)?;
        let o = out(out_state)?;
        let orientation = Orientation::from_index(a.orientation as usize)
            .ok_or_else(|| (UbStatus::InvalidArgument, format!("orientation {} out of range", a.orientation)))?;
        let act = AssemblyAction::new(a.pick_id, [a.x, a.y, a.z], orientation);
        let next = s.0.apply_action(&act).map_err(|e| (UbStatus::InvalidAction, e.to_string()))?;
        *o = boxed(UbState(next));
        Ok(())
    })
}

/// Classify a state: `success` nonzero requires every primitive in the shape.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ub_classify(
    cat: *const UbCategory,
    state: *const UbState,
    success: i32,
    result: *mut bool,
) -> UbStatus {
    guard(|| {
        let c = deref(cat)?;
        let s = deref(state)?;
        let variant = if success != 0 { Variant::Success } else { Variant::Progress };
        *out(result)? = c.0.classify(&s.0, variant);
        Ok(())
    })
}

/// Load a value network checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_net` valid.
#[no_mangle]
pub unsafe extern "C" fn ub_net_load(path: *const c_char, out_net: *mut *mut UbNet) -> UbStatus {
    guard(|| {
        let p = str_arg(path)?;
        let o = out(out_net)?;
        let net = ValueNet::load(Path::new(p)).map_err(|e| match e {
            unbuild::value::NetError::Io(e) => (UbStatus::Io, e.to_string()),
            e => (UbStatus::Checkpoint, e.to_string()),
        })?;
        if net.arch.input_dim != ENCODING_DIM {
            return Err((
                UbStatus::Checkpoint,
                format!("checkpoint expects {} features, states encode to {}", net.arch.input_dim, ENCODING_DIM),
            ));
        }
        *o = boxed(UbNet(net));
        Ok(())
    })
}

/// Freshly initialized (untrained) network; useful for tests.
///
/// # Safety
/// `out_net` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ub_net_new(gamma: f64, seed: u64, out_net: *mut *mut UbNet) -> UbStatus {
    guard(|| {
        let o = out(out_net)?;
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err((UbStatus::InvalidArgument, format!("gamma {gamma} not in (0, 1]")));
        }
        *o = boxed(UbNet(ValueNet::new(ENCODING_DIM, gamma, seed)));
        Ok(())
    })
}

/// # Safety
/// `net` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ub_net_free(net: *mut UbNet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ub_net_value(net: *const UbNet, state: *const UbState, value: *mut f64) -> UbStatus {
    guard(|| {
        let n = deref(net)?;
        let s = deref(state)?;
        *out(value)? = n.0.values(std::slice::from_ref(&s.0))[0];
        Ok(())
    })
}

/// The greedy action: maximal value of the successor state.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ub_net_greedy_action(
    net: *const UbNet,
    state: *const UbState,
    action: *mut UbAction,
) -> UbStatus {
    guard(|| {
        let n = deref(net)?;
        let s = deref(state)?;
        let o = out(action)?;
        let (a, _) = greedy_policy_step(&n.0, &s.0).map_err(|e| (UbStatus::NoAction, e.to_string()))?;
        *o = (&a).into();
        Ok(())
    })
}

/// Random seeded scatter of arbitrary pieces: `lengths` and `colors` (color
/// indices starting at 1) of equal length `n`, on the category's workspace.
///
/// # Safety
/// `lengths` and `colors` must hold `n` entries.
#[no_mangle]
pub unsafe extern "C" fn ub_state_scatter_pieces(
    cat: *const UbCategory,
    lengths: *const u8,
    colors: *const u8,
    n: usize,
    seed: u64,
    out_state: *mut *mut UbState,
) -> UbStatus {
    guard(|| {
        let c = deref(cat)?;
        let o = out(out_state)?;
        if n > 0 && (lengths.is_null() || colors.is_null()) {
            return Err(null());
        }
        let (ls, cs) = if n == 0 {
            (&[][..], &[][..])
        } else {
            (std::slice::from_raw_parts(lengths, n), std::slice::from_raw_parts(colors, n))
        };
        let mut pieces = Vec::with_capacity(n);
        for (&l, &ci) in ls.iter().zip(cs) {
            if !(1..=3).contains(&l) {
                return Err((UbStatus::InvalidArgument, format!("length {l} not in 1..=3")));
            }
            let color = unbuild::Color::from_index(ci)
                .ok_or_else(|| (UbStatus::InvalidArgument, format!("color index {ci} out of range")))?;
            pieces.push((l, color));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = WorldState::scatter(Arc::new(c.0.workspace()), &pieces, 0, &mut rng)
            .map_err(|e| (UbStatus::InvalidState, e.to_string()))?;
        *o = boxed(UbState(s));
        Ok(())
    })
}
