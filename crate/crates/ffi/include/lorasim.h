#ifndef LORASIM_H
#define LORASIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum LsStatus {
  LS_STATUS_OK = 0,
  LS_STATUS_NULL_POINTER = 1,
  LS_STATUS_INVALID_ARGUMENT = 2,
  // Malformed or invalid scenario text.
  LS_STATUS_PARSE = 3,
  LS_STATUS_IO = 4,
  // The simulation failed or was aborted.
  LS_STATUS_RUN = 5,
  // A firmware module could not be loaded or faulted.
  LS_STATUS_FIRMWARE = 6,
  // Internal error; the call had no effect on its inputs.
  LS_STATUS_PANIC = 7,
  // A string argument was not valid UTF-8.
  LS_STATUS_UTF8 = 8,
  // Index past the end of a table.
  LS_STATUS_OUT_OF_RANGE = 9,
} LsStatus;

// Outputs of a finished run.
typedef struct LsRun LsRun;

// Parsed scenario.
typedef struct LsScenario LsScenario;

// Per-radio summary. `pdr` and `mean_snr_db` are NaN when undefined.
typedef struct LsRadioSummary {
  uint64_t sent;
  uint64_t delivered;
  double pdr;
  double mean_snr_db;
  double energy_j;
} LsRadioSummary;

// LoRa modulation parameters for `ls_airtime`.
typedef struct LsRadioConfig {
  uint32_t frequency_hz;
  uint8_t sf;
  uint32_t bw_hz;
  // Coding rate 4/(4+cr), cr in 1..=4.
  uint8_t cr;
  uint16_t preamble_symbols;
  bool explicit_header;
  bool crc_on;
  bool ldro;
} LsRadioConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or "" if none. The
// pointer stays valid until the next failing call on the same thread.
const char *ls_last_error(void);

// Library version as a static NUL-terminated string.
const char *ls_version(void);

// Parses scenario text.
//
// # Safety
// `text` must be a NUL-terminated string and `out` valid for writes.
enum LsStatus ls_scenario_parse(const char *text, struct LsScenario **out);

// Reads and parses a scenario file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` valid for writes.
enum LsStatus ls_scenario_load(const char *path, struct LsScenario **out);

// # Safety
// `scenario` must be null or a live handle from this library.
void ls_scenario_free(struct LsScenario *scenario);

// # Safety
// `scenario` must be a live handle.
enum LsStatus ls_scenario_set_seed(struct LsScenario *scenario, uint64_t seed);

// # Safety
// `scenario` must be a live handle.
enum LsStatus ls_scenario_set_length(struct LsScenario *scenario, double length_s);

// Runs a scenario to completion.
//
// # Safety
// `scenario` must be a live handle and `out` valid for writes.
enum LsStatus ls_run(const struct LsScenario *scenario, struct LsRun **out);

// # Safety
// `run` must be null or a live handle from this library.
void ls_run_free(struct LsRun *run);

// Writes phy_packets.csv, radio_receptions.csv and energy_events.csv.
//
// # Safety
// `run` must be a live handle and `dir` a NUL-terminated string.
enum LsStatus ls_run_export(const struct LsRun *run, const char *dir);

// Row counts of the three tables. Null pointers are skipped.
//
// # Safety
// `run` must be a live handle; the out pointers null or valid for writes.
enum LsStatus ls_run_table_sizes(const struct LsRun *run,
                                 uintptr_t *packets,
                                 uintptr_t *receptions,
                                 uintptr_t *energy_events);

// Number of radios in the summary.
//
// # Safety
// `run` must be a live handle and `count` valid for writes.
enum LsStatus ls_run_radio_count(const struct LsRun *run, uintptr_t *count);

// Summary of radio `index`.
//
// # Safety
// `run` must be a live handle and `out` valid for writes.
enum LsStatus ls_run_radio_summary(const struct LsRun *run,
                                   uintptr_t index,
                                   struct LsRadioSummary *out);

// Copies the id of radio `index` into `buf` (NUL-terminated, truncated to
// `len`) and stores the full length without the NUL in `needed`. Pass a
// null `buf` to query the length.
//
// # Safety
// `run` must be a live handle; `buf` null or valid for `len` bytes;
// `needed` null or valid for writes.
enum LsStatus ls_run_radio_id(const struct LsRun *run,
                              uintptr_t index,
                              char *buf,
                              uintptr_t len,
                              uintptr_t *needed);

// Time on air in seconds of a `payload_len`-byte frame.
//
// # Safety
// `config` must be valid for reads and `seconds` valid for writes.
enum LsStatus ls_airtime(const struct LsRadioConfig *config,
                         uintptr_t payload_len,
                         double *seconds);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LORASIM_H */
