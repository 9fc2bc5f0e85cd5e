/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_session_free: (a: number, b: number) => void;
export const diffusionView: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const session_new: (a: number, b: number) => [number, number, number];
export const session_query: (a: number, b: number, c: number) => [number, number, number, number];
export const session_summary: (a: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
