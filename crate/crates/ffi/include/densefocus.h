#ifndef DENSEFOCUS_H
#define DENSEFOCUS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Loss family selector for [`DfLossConfig`].
 */
typedef enum DfLossKind {
  DF_LOSS_KIND_CE = 0,
  DF_LOSS_KIND_ALPHA_CE = 1,
  DF_LOSS_KIND_FOCAL = 2,
  DF_LOSS_KIND_FOCAL_STAR = 3,
  DF_LOSS_KIND_HINGE = 4,
} DfLossKind;

/**
 * Status code returned by every fallible call.
 */
typedef enum DfStatus {
  DF_STATUS_OK = 0,
  DF_STATUS_NULL_POINTER = 1,
  DF_STATUS_INVALID_ARGUMENT = 2,
  DF_STATUS_SHAPE_MISMATCH = 3,
  DF_STATUS_INVALID_CONFIG = 4,
  DF_STATUS_IO = 5,
  DF_STATUS_DIVERGED = 6,
  DF_STATUS_PANIC = 7,
} DfStatus;

/**
 * Opaque anchor layout.
 */
typedef struct DfAnchorSet DfAnchorSet;

/**
 * Opaque dense head.
 */
typedef struct DfHead DfHead;

/**
 * `alpha` is used only when `has_alpha` is non-zero.
 */
typedef struct DfLossConfig {
  enum DfLossKind kind;
  double gamma;
  double alpha;
  uint8_t has_alpha;
  double beta;
} DfLossConfig;

typedef struct DfBox {
  double x1;
  double y1;
  double x2;
  double y2;
} DfBox;

typedef struct DfRegressionTarget {
  double tx;
  double ty;
  double tw;
  double th;
} DfRegressionTarget;

typedef struct DfDetection {
  struct DfBox bbox;
  double score;
  uint32_t class_id;
} DfDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *df_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length
 * without the terminator, or 0 when there is no message.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t df_last_error_message(char *buf, size_t len);

/**
 * # Safety
 * `out` must be null or writable.
 */
enum DfStatus df_sigmoid(double x, double *out);

/**
 * Loss of logit `x` under label `y` (+1 or -1).
 *
 * # Safety
 * `cfg` must be null or readable; `out` must be null or writable.
 */
enum DfStatus df_loss_value(double x, int32_t y, const struct DfLossConfig *cfg, double *out);

/**
 * Derivative of the loss with respect to the logit.
 *
 * # Safety
 * As [`df_loss_value`].
 */
enum DfStatus df_loss_grad(double x, int32_t y, const struct DfLossConfig *cfg, double *out);

/**
 * # Safety
 * Pointers must be null or valid.
 */
enum DfStatus df_iou(const struct DfBox *a, const struct DfBox *b, double *out);

/**
 * # Safety
 * Pointers must be null or valid.
 */
enum DfStatus df_encode(const struct DfBox *anchor,
                        const struct DfBox *gt,
                        struct DfRegressionTarget *out);

/**
 * # Safety
 * Pointers must be null or valid.
 */
enum DfStatus df_decode(const struct DfBox *anchor,
                        const struct DfRegressionTarget *t,
                        struct DfBox *out);

/**
 * Class-wise greedy NMS. Survivors are written to `out` (capacity
 * `out_cap`, at least `n` is always enough) sorted by descending score;
 * their count goes to `out_len`.
 *
 * # Safety
 * `dets` must hold `n` readable entries; `out` must hold `out_cap` writable entries.
 */
enum DfStatus df_nms(const struct DfDetection *dets,
                     size_t n,
                     double iou_threshold,
                     struct DfDetection *out,
                     size_t out_cap,
                     size_t *out_len);

/**
 * Anchors of the default pyramid (levels 3-7, 3 ratios, 3 scales).
 *
 * # Safety
 * `out` must be null or writable; on success it receives a handle to free
 * with [`df_anchor_set_free`].
 */
enum DfStatus df_anchor_set_new(uint32_t width, uint32_t height, struct DfAnchorSet **out);

/**
 * Number of anchors, or 0 for a null handle.
 *
 * # Safety
 * `set` must be null or a live handle.
 */
size_t df_anchor_set_len(const struct DfAnchorSet *set);

/**
 * # Safety
 * `set` must be null or a live handle; `out` null or writable.
 */
enum DfStatus df_anchor_set_get(const struct DfAnchorSet *set, size_t index, struct DfBox *out);

/**
 * # Safety
 * `set` must be null or a handle not yet freed.
 */
void df_anchor_set_free(struct DfAnchorSet *set);

/**
 * Freshly initialised head; `hidden == 0` selects the linear architecture.
 *
 * # Safety
 * `out` must be null or writable; free the handle with [`df_head_free`].
 */
enum DfStatus df_head_new(size_t input_dim,
                          size_t num_classes,
                          size_t hidden,
                          double pi,
                          uint64_t seed,
                          struct DfHead **out);

/**
 * Loads a head from its JSON document.
 *
 * # Safety
 * `json` must be null or a NUL-terminated string; `out` null or writable.
 */
enum DfStatus df_head_from_json(const char *json, struct DfHead **out);

/**
 * Serialises a head; release the string with [`df_string_free`].
 *
 * # Safety
 * `head` must be null or live; `out` null or writable.
 */
enum DfStatus df_head_to_json(const struct DfHead *head, char **out);

/**
 * # Safety
 * `head` must be null or live.
 */
size_t df_head_input_dim(const struct DfHead *head);

/**
 * # Safety
 * `head` must be null or live.
 */
size_t df_head_num_classes(const struct DfHead *head);

/**
 * Forward pass over `rows` feature vectors of length `cols`.
 *
 * Writes `rows * num_classes` logits and, when `boxes` is non-null,
 * `rows * 4` regression outputs.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum DfStatus df_head_forward(const struct DfHead *head,
                              const double *features,
                              size_t rows,
                              size_t cols,
                              double *logits,
                              size_t logits_len,
                              double *boxes,
                              size_t boxes_len);

/**
 * # Safety
 * `head` must be null or a handle not yet freed.
 */
void df_head_free(struct DfHead *head);

/**
 * # Safety
 * `s` must be null or a string returned by this library and not yet freed.
 */
void df_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DENSEFOCUS_H */
