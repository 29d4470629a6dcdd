#ifndef UNBUILD_H
#define UNBUILD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum UbStatus {
  UB_STATUS_OK = 0,
  UB_STATUS_NULL_POINTER = 1,
  UB_STATUS_INVALID_ARGUMENT = 2,
  UB_STATUS_INVALID_STATE = 3,
  UB_STATUS_INVALID_ACTION = 4,
  UB_STATUS_IO = 5,
  UB_STATUS_CHECKPOINT = 6,
  UB_STATUS_NO_ACTION = 7,
  UB_STATUS_BUFFER_TOO_SMALL = 8,
  UB_STATUS_PANIC = 9,
} UbStatus;

/**
 * A shape category with its classifier.
 */
typedef struct UbCategory UbCategory;

/**
 * A trained value network.
 */
typedef struct UbNet UbNet;

/**
 * A world state.
 */
typedef struct UbState UbState;

/**
 * One pick-and-place action. `orientation` is 0 (along x), 1 (along y) or
 * 2 (along z).
 */
typedef struct UbAction {
  uint32_t pick_id;
  double x;
  double y;
  double z;
  uint32_t orientation;
} UbAction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *ub_last_error(void);

/**
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void ub_string_free(char *s);

/**
 * Arch category of height `height` (3 to 5).
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum UbStatus ub_category_arch(uint8_t height, struct UbCategory **out_cat);

/**
 * Tower category of `n_cubes` cubes.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum UbStatus ub_category_tower(size_t n_cubes, struct UbCategory **out_cat);

/**
 * # Safety
 * `cat` must come from this library and not be freed twice.
 */
void ub_category_free(struct UbCategory *cat);

/**
 * # Safety
 * Pointers must be valid.
 */
enum UbStatus ub_category_instance_count(const struct UbCategory *cat, size_t *count);

/**
 * Primitives of a uniformly chosen instance scattered loose on the table.
 *
 * # Safety
 * Pointers must be valid.
 */
enum UbStatus ub_state_scatter(const struct UbCategory *cat,
                               uint64_t seed,
                               struct UbState **out_state);

/**
 * Parse a state from its JSON form.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out_state` valid.
 */
enum UbStatus ub_state_from_json(const char *json, struct UbState **out_state);

/**
 * Serialize a state; free the result with [`ub_string_free`].
 *
 * # Safety
 * Pointers must be valid.
 */
enum UbStatus ub_state_to_json(const struct UbState *state, char **out_json);

/**
 * # Safety
 * `state` must come from this library and not be freed twice.
 */
void ub_state_free(struct UbState *state);

/**
 * # Safety
 * Pointers must be valid.
 */
enum UbStatus ub_state_primitive_count(const struct UbState *state, size_t *count);

/**
 * Enumerate valid actions. With `buf` null (or too small) only `count` is
 * written and [`UbStatus::BufferTooSmall`] is returned when actions exist.
 *
 * # Safety
 * `buf` must hold `cap` actions when non-null.
 */
enum UbStatus ub_state_actions(const struct UbState *state,
                               struct UbAction *buf,
                               size_t cap,
                               size_t *count);

/**
 * Apply an action, producing a new state; the input state is unchanged.
 *
 * # Safety
 * Pointers must be valid.
 */
enum UbStatus ub_state_apply(const struct UbState *state,
                             const struct UbAction *action,
                             struct UbState **out_state);

/**
 * Classify a state: `success` nonzero requires every primitive in the shape.
 *
 * # Safety
 * Pointers must be valid.
 */
enum UbStatus ub_classify(const struct UbCategory *cat,
                          const struct UbState *state,
                          int32_t success,
                          bool *result);

/**
 * Load a value network checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out_net` valid.
 */
enum UbStatus ub_net_load(const char *path, struct UbNet **out_net);

/**
 * Freshly initialized (untrained) network; useful for tests.
 *
 * # Safety
 * `out_net` must be valid.
 */
enum UbStatus ub_net_new(double gamma, uint64_t seed, struct UbNet **out_net);

/**
 * # Safety
 * `net` must come from this library and not be freed twice.
 */
void ub_net_free(struct UbNet *net);

/**
 * # Safety
 * Pointers must be valid.
 */
enum UbStatus ub_net_value(const struct UbNet *net, const struct UbState *state, double *value);

/**
 * The greedy action: maximal value of the successor state.
 *
 * # Safety
 * Pointers must be valid.
 */
enum UbStatus ub_net_greedy_action(const struct UbNet *net,
                                   const struct UbState *state,
                                   struct UbAction *action);

/**
 * Random seeded scatter of arbitrary pieces: `lengths` and `colors` (color
 * indices starting at 1) of equal length `n`, on the category's workspace.
 *
 * # Safety
 * `lengths` and `colors` must hold `n` entries.
 */
enum UbStatus ub_state_scatter_pieces(const struct UbCategory *cat,
                                      const uint8_t *lengths,
                                      const uint8_t *colors,
                                      size_t n,
                                      uint64_t seed,
                                      struct UbState **out_state);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNBUILD_H */
