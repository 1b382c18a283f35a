/*
 * Hardware abstraction layer seen by firmware running in the simulator.
 *
 * Firmware includes this header unchanged for the host build and for the
 * target build; the simulator provides the implementations on the host.
 */
#ifndef SIM_HAL_H
#define SIM_HAL_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef struct {
    uint32_t frequency_hz;
    uint8_t sf;               /* 7..12 */
    uint32_t bw_hz;           /* 125000, 250000 or 500000 */
    uint8_t cr;               /* 1..4, coding rate 4/(4+cr) */
    uint16_t preamble_symbols;
    uint8_t iq_inverted;
    uint8_t explicit_header;
    uint8_t crc_on;
    int8_t tx_power_dbm;
} SIM_RadioConfig;

/* Blocks for ms milliseconds of simulated time. */
void HAL_Delay(uint32_t ms);

/* Milliseconds of simulated time since start. */
uint32_t HAL_GetTick(void);

/* Returns 0 on success, -1 if the configuration is rejected. */
int32_t SIM_RadioConfigure(const SIM_RadioConfig *cfg);

/* Returns 0 once the packet has left the air, -1 on error. */
int32_t SIM_RadioTransmit(const uint8_t *buf, int32_t len);

/*
 * Waits up to timeout_ms for a packet. Returns the number of bytes copied
 * into buf (at most maxlen), or -1 on timeout or error.
 */
int32_t SIM_RadioReceive(uint8_t *buf, int32_t maxlen, uint32_t timeout_ms);

/* Firmware entry point. */
int firmware_main(void);

#ifdef __cplusplus
}
#endif

#endif
